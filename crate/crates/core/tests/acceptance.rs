//! Acceptance suite. Prints one PASS or FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;

use commstance::community::{cosharing_graph, louvain_partition, modularity, NodeId, Partition};
use commstance::corpus::{run_message_passing_round, Corpus};
use commstance::eval::{kendall_tau_b, reweight_truth, spearman, GroundTruthTable, RankingTask};
use commstance::graph::RetweetNetwork;
use commstance::ideology::{Ideology, IdeologyMix};
use commstance::lm::{CommunityLm, NGramConfig, NGramModel};
use commstance::pipeline::{collect_reports, stage_dir, MpMode, Pipeline, RunConfig, Stage};
use commstance::probe::{
    build_stance_matrix, probe_stance, LexiconScorer, ProbeConfig, ProbeError, SentimentScorer, StanceMatrix, Target,
    TargetKind,
};
use commstance::seed;
use commstance::synth::{planted_bipartite, PlantedSpec};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- fixtures

struct Fixture {
    strata: BTreeMap<u32, [u64; 3]>,
    counts: BTreeMap<(u32, u32), u64>,
    corpora: BTreeMap<u32, Corpus>,
    net: RetweetNetwork,
    seed: u64,
}

/// Random communities, corpora and integer retweet counts. Odd fixtures give
/// every community unknown-author tweets, even ones give none.
fn fixture(k: u64) -> Fixture {
    let mut rng = seed::rng(k, &[seed::tag("mp-fixture")]);
    let n = rng.gen_range(2..=6u32);
    let with_unknown = k % 2 == 1;
    let mut strata = BTreeMap::new();
    let mut corpora = BTreeMap::new();
    for c in 1..=n {
        let s = [
            rng.gen_range(1..=80u64),
            rng.gen_range(1..=80u64),
            if with_unknown { rng.gen_range(1..=40u64) } else { 0 },
        ];
        let mut texts = Vec::new();
        for (idx, label) in [Ideology::Liberal, Ideology::Conservative, Ideology::Unknown]
            .into_iter()
            .enumerate()
        {
            for t in 0..s[idx] {
                texts.push((format!("c{c} {} {t}", label.as_str()), label));
            }
        }
        texts.shuffle(&mut rng);
        strata.insert(c, s);
        corpora.insert(c, Corpus::from_texts(c, texts).expect("labeled corpus"));
    }
    let mut counts = BTreeMap::new();
    for i in 1..=n {
        if rng.gen_bool(0.1) {
            continue;
        }
        let mut others: Vec<u32> = (1..=n).collect();
        others.shuffle(&mut rng);
        let deg = rng.gen_range(1..=n.min(4) as usize);
        for &j in &others[..deg] {
            counts.insert((i, j), rng.gen_range(1..=20u64));
        }
    }
    let float: BTreeMap<(u32, u32), f64> = counts.iter().map(|(&e, &c)| (e, c as f64)).collect();
    let net = RetweetNetwork::from_counts(1..=n, &float);
    Fixture {
        strata,
        counts,
        corpora,
        net,
        seed: rng.gen(),
    }
}

fn stratum_index(s: Ideology) -> usize {
    match s {
        Ideology::Liberal => 0,
        Ideology::Conservative => 1,
        Ideology::Unknown => 2,
    }
}

fn lib_fraction(c: &Corpus) -> f64 {
    let [l, k, _] = c.stratum_counts();
    l as f64 / (l + k) as f64
}

// ---------------------------------------------------------------- criteria

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let f = fixture(k);
        let (after, _) = run_message_passing_round(&f.corpora, &f.net, f.seed).map_err(|e| e.to_string())?;
        for (id, before) in &f.corpora {
            let a = &after[id];
            check(
                a.len() == before.len(),
                format!("fixture {k} community {id}: size {} -> {}", before.len(), a.len()),
            )?;
            let drift = (lib_fraction(a) - lib_fraction(before)).abs();
            let bound = 2.0 / before.len() as f64;
            check(
                drift <= bound,
                format!("fixture {k} community {id}: drift {drift} > {bound}"),
            )?;
            worst = worst.max(drift * before.len() as f64);
        }
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(60), format!("took {took:?}"))?;
    Ok(format!("200 fixtures, max drift {worst:.3}/|D|, {took:.2?}"))
}

fn criterion_2() -> Outcome {
    let mut checked = 0;
    for k in 0..200 {
        let f = fixture(k);
        let (after, _) = run_message_passing_round(&f.corpora, &f.net, f.seed).map_err(|e| e.to_string())?;
        for (&i, own) in &f.strata {
            if own.iter().sum::<u64>() > 200 {
                continue;
            }
            let edges: Vec<(u32, u64)> = f
                .counts
                .range((i, 0)..=(i, u32::MAX))
                .map(|(&(_, j), &c)| (j, c))
                .collect();
            let mut got: BTreeMap<(u32, usize), u64> = BTreeMap::new();
            for t in &after[&i].tweets {
                *got.entry((t.source, stratum_index(t.stratum))).or_insert(0) += 1;
            }
            let want = if edges.is_empty() {
                let mut m = BTreeMap::new();
                for (s, &c) in own.iter().enumerate().filter(|(_, &c)| c > 0) {
                    m.insert((i, s), c);
                }
                m
            } else {
                common::expected_draws(*own, &edges, &f.strata)
            };
            check(
                got == want,
                format!("fixture {k} community {i} (strata {own:?}, edges {edges:?}): got {got:?}, oracle {want:?}"),
            )?;
            checked += 1;
        }
    }
    Ok(format!("{checked} communities match the brute-force oracle exactly"))
}

fn permutations(n: usize) -> Vec<Vec<f64>> {
    fn rec(cur: &mut Vec<f64>, rest: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for k in 0..rest.len() {
            let v = rest.remove(k);
            cur.push(v);
            rec(cur, rest, out);
            cur.pop();
            rest.insert(k, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (1..=n).map(|v| v as f64).collect(), &mut out);
    out
}

fn criterion_3() -> Outcome {
    const TOL: f64 = 1e-12;
    let perms = permutations(6);
    check(perms.len() == 720, "expected 720 permutations")?;
    let x: Vec<f64> = (1..=6).map(|v| v as f64).collect();
    let mut worst: f64 = 0.0;
    for y in &perms {
        let s = spearman(&x, y).map_err(|e| e.to_string())?;
        let k = kendall_tau_b(&x, y).map_err(|e| e.to_string())?;
        let by_ranks = common::brute_spearman(&x, y).expect("permutation has variance");
        let by_d2 = common::spearman_no_ties(&x, y);
        let by_pairs = common::brute_kendall(&x, y).expect("permutation has variance");
        for (a, b, what) in [
            (s, by_ranks, "spearman/ranks"),
            (s, by_d2, "spearman/d2"),
            (k, by_pairs, "kendall/pairs"),
        ] {
            check((a - b).abs() <= TOL, format!("{what} on {y:?}: {a} vs {b}"))?;
            worst = worst.max((a - b).abs());
        }
    }
    let mut rng = seed::rng(3, &[seed::tag("tied-lists")]);
    let mut degenerate = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=12);
        let levels = rng.gen_range(2..=5);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        match (spearman(&a, &b), common::brute_spearman(&a, &b)) {
            (Ok(s), Some(o)) => {
                check((s - o).abs() <= TOL, format!("spearman on {a:?} {b:?}: {s} vs {o}"))?;
                worst = worst.max((s - o).abs());
            }
            (Err(_), None) => degenerate += 1,
            (s, o) => return Err(format!("spearman on {a:?} {b:?}: {s:?} vs {o:?}")),
        }
        match (kendall_tau_b(&a, &b), common::brute_kendall(&a, &b)) {
            (Ok(k), Some(o)) => {
                check((k - o).abs() <= TOL, format!("kendall on {a:?} {b:?}: {k} vs {o}"))?;
                worst = worst.max((k - o).abs());
            }
            (Err(_), None) => {}
            (k, o) => return Err(format!("kendall on {a:?} {b:?}: {k:?} vs {o:?}")),
        }
    }
    Ok(format!(
        "720 permutations and 1000 tied lists ({degenerate} constant), max error {worst:.1e}"
    ))
}

fn criterion_4() -> Outcome {
    let mut min_nmi: f64 = 1.0;
    for s in 0..20 {
        let spec = PlantedSpec {
            seed: s,
            ..PlantedSpec::default()
        };
        check(spec.intra_weight == 10 * spec.inter_weight, "planted weights")?;
        let (net, planted) = planted_bipartite(&spec);
        let part = louvain_partition(&net, 1.0, s).map_err(|e| e.to_string())?;
        let nodes: Vec<&NodeId> = planted.keys().collect();
        let truth: Vec<usize> = nodes.iter().map(|n| planted[*n]).collect();
        let found: Vec<u32> = nodes.iter().map(|n| part.assignment[*n]).collect();
        let score = common::nmi(&truth, &found);
        check(score >= 0.95, format!("seed {s}: NMI {score:.4}"))?;
        min_nmi = min_nmi.min(score);
        let (all, _) = cosharing_graph(&net);
        let singletons = Partition::from_labels(&all, &(0..all.len()).collect::<Vec<_>>());
        let q = modularity(&net, &part, 1.0);
        let q0 = modularity(&net, &singletons, 1.0);
        check(q >= q0, format!("seed {s}: modularity {q} below singletons {q0}"))?;
    }
    Ok(format!("20 seeds, min NMI {min_nmi:.4}"))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::load(&repo_root().join("configs/sparse_mention.toml")).map_err(|e| e.to_string())?;
    cfg.workdir = dir.path().to_path_buf();
    check(cfg.params.seeds.len() == 5, "scenario config should list 5 seeds")?;
    for mode in [MpMode::On, MpMode::Off, MpMode::Random] {
        let mut c = cfg.clone();
        c.params.mp = mode;
        Pipeline::new(c)
            .and_then(|p| p.run_all())
            .map_err(|e| format!("{} run: {e}", mode.as_str()))?;
    }
    let runs = collect_reports(dir.path(), RankingTask::TargetSpecific).map_err(|e| e.to_string())?;
    let mean = |label: &str, prompt: usize| -> Result<f64, String> {
        runs.iter()
            .find(|(l, _)| l == label)
            .and_then(|(_, r)| r.iter().find(|a| a.prompt_index == prompt))
            .and_then(|a| a.spearman)
            .map(|s| s.mean)
            .ok_or_else(|| format!("no {label} result for prompt {prompt}"))
    };
    let mut lines = Vec::new();
    for prompt in 1..=4 {
        let (on, off, random) = (mean("on", prompt)?, mean("off", prompt)?, mean("random", prompt)?);
        lines.push(format!("p{prompt} on {on:.3} off {off:.3} random {random:.3}"));
        check(on >= 0.8, format!("prompt {prompt}: MP-on mean {on:.3} < 0.8"))?;
        check(on - off >= 0.05, format!("prompt {prompt}: on {on:.3} vs off {off:.3}"))?;
        check(
            on - random >= 0.05,
            format!("prompt {prompt}: on {on:.3} vs random {random:.3}"),
        )?;
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(600), format!("took {took:?}"))?;
    Ok(format!("{}; {took:.1?}", lines.join(", ")))
}

fn criterion_6() -> Outcome {
    let cases = [
        (0.05, 90.0, 10.0, 14.0),
        (0.5, 80.0, 20.0, 50.0),
        (1.0, 70.0, 30.0, 70.0),
        (0.0, 70.0, 30.0, 30.0),
        (0.25, 100.0, 0.0, 25.0),
        (0.8, 60.0, 35.0, 55.0),
    ];
    for (r, s_lib, s_con, want) in cases {
        let mut gt = GroundTruthTable::default();
        gt.insert("T", s_lib, s_con).map_err(|e| e.to_string())?;
        let mix = IdeologyMix::new(r).map_err(|e| e.to_string())?;
        let got = reweight_truth(&gt, "T", mix).map_err(|e| e.to_string())?;
        check(
            (got - want).abs() <= 1e-12,
            format!("mix {r} with {s_lib}/{s_con}: {got} vs {want}"),
        )?;
    }
    Ok("0.05/0.95 with 90/10 gives 14.0, 6 hand cases within 1e-12".into())
}

struct Counting<'a> {
    inner: &'a dyn SentimentScorer,
    calls: AtomicUsize,
}

impl SentimentScorer for Counting<'_> {
    fn score(&self, text: &str) -> Result<i8, ProbeError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score(text)
    }
}

fn probe_models() -> Result<BTreeMap<u32, Box<dyn CommunityLm>>, String> {
    let names = ["Alice Smith", "Bob Jones", "farmers"];
    let mut models: BTreeMap<u32, Box<dyn CommunityLm>> = BTreeMap::new();
    for (c, word) in [(1u32, "good"), (2, "bad"), (3, "fine")] {
        let mut texts = Vec::new();
        for (t, name) in names.iter().enumerate() {
            let cop = if t == 2 { "are" } else { "is" };
            texts.push((format!("{name} {cop} {word} ."), Ideology::Liberal));
            texts.push((format!("{name} {cop} a {word} presence ."), Ideology::Conservative));
            texts.push((format!("{name} {cop} the {word} choice and so on ."), Ideology::Liberal));
            texts.push((format!("{name} {cop} not {word} ."), Ideology::Conservative));
        }
        let corpus = Corpus::from_texts(c, texts).map_err(|e| e.to_string())?;
        let mut m = NGramModel::new(NGramConfig {
            order: 3,
            k: 0.05,
            min_count: 1,
        })
        .map_err(|e| e.to_string())?;
        m.fit(&corpus, 1).map_err(|e| e.to_string())?;
        models.insert(c, Box::new(m));
    }
    Ok(models)
}

fn criterion_7() -> Outcome {
    let models = probe_models()?;
    let targets = vec![
        Target::new("Alice Smith", TargetKind::Person),
        Target::new("Bob Jones", TargetKind::Person),
        Target::new("farmers", TargetKind::Group),
    ];
    let config = ProbeConfig {
        n: 1000,
        keep: 850,
        max_tokens: 16,
        seed: 11,
    };
    let lexicon = LexiconScorer::bundled();
    for (&c, m) in &models {
        for t in &targets {
            for p in 1..=4 {
                let counter = Counting {
                    inner: &lexicon,
                    calls: AtomicUsize::new(0),
                };
                let mut rng = seed::rng(config.seed, &[u64::from(c), p as u64]);
                let cell = probe_stance(m.as_ref(), t, p, &config, &counter, &mut rng).map_err(|e| e.to_string())?;
                let calls = counter.calls.load(Ordering::Relaxed);
                check(
                    calls == 850,
                    format!("community {c} {} prompt {p}: scorer called {calls} times", t.name),
                )?;
                check(cell.n_scored == 850, format!("n_scored {}", cell.n_scored))?;
                check((-1.0..=1.0).contains(&cell.score), format!("score {}", cell.score))?;
            }
        }
    }
    let render = || -> Result<Vec<u8>, String> {
        let mut mats = Vec::new();
        for p in 1..=4 {
            let m = build_stance_matrix(&models, &targets, p, &config, &lexicon, None).map_err(|e| e.to_string())?;
            check(m.is_complete(), "incomplete matrix")?;
            for cell in m.cells.values() {
                check(
                    cell.n_scored == 850 && (-1.0..=1.0).contains(&cell.score),
                    format!("cell {cell:?}"),
                )?;
            }
            mats.push(m);
        }
        let mut out = Vec::new();
        StanceMatrix::write_csv(&mats, &mut out, None).map_err(|e| e.to_string())?;
        Ok(out)
    };
    let first = render()?;
    let second = render()?;
    check(first == second, "fixed-seed reruns differ")?;
    Ok(format!(
        "{} cells x 4 prompts, 850 scored each, reruns byte-identical",
        models.len() * targets.len()
    ))
}

const SMALL_SCENARIO: &str = r#"
seed = 5
retweet_weights = [[0.7, 0.3, 0.0], [0.2, 0.6, 0.2], [0.0, 0.4, 0.6]]

[[community]]
users = 10
tweets = 150
r_lib = 0.8
mention_rate = 0.2

[[community]]
users = 10
tweets = 150
r_lib = 0.5
mention_rate = 0.2

[[community]]
users = 10
tweets = 150
r_lib = 0.2
mention_rate = 0.05

[[target]]
name = "Ann Lee"
kind = "person"
p_lib = 1.0
p_con = -1.0

[[target]]
name = "Max Roe"
kind = "person"
p_lib = -0.5
p_con = 0.5

[[target]]
name = "bakers"
kind = "group"
p_lib = 0.2
p_con = 0.8
"#;

fn small_run(root: &Path, workdir: &str) -> Result<Pipeline, String> {
    let text = format!(
        "workdir = \"{workdir}\"\nscenario = \"scenario.toml\"\n[params]\nn = 60\nkeep = 50\nseeds = [1, 2]\ntop_n_eval = 3\n"
    );
    let cfg = RunConfig::from_toml(&text, root).map_err(|e| e.to_string())?;
    let p = Pipeline::new(cfg).map_err(|e| e.to_string())?;
    p.run_all().map_err(|e| e.to_string())?;
    Ok(p)
}

fn criterion_8() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    fs::write(root.path().join("scenario.toml"), SMALL_SCENARIO).map_err(|e| e.to_string())?;
    let a = small_run(root.path(), "first")?;
    let b = small_run(root.path(), "second")?;
    check(a.config_hash() == b.config_hash(), "config hashes differ")?;
    let mut compared = 0;
    for name in ["target_specific.csv", "community_specific.csv", "units.csv"] {
        let x = fs::read(stage_dir(&root.path().join("first"), Stage::Evaluate, MpMode::On).join(name))
            .map_err(|e| e.to_string())?;
        let y = fs::read(stage_dir(&root.path().join("second"), Stage::Evaluate, MpMode::On).join(name))
            .map_err(|e| e.to_string())?;
        check(!x.is_empty() && x == y, format!("{name} differs"))?;
        compared += 1;
    }
    Ok(format!("{compared} report CSVs byte-identical across workdirs"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 message passing preserves size and mix", criterion_1),
        ("2 message passing matches formula oracle", criterion_2),
        ("3 rank statistics match brute force", criterion_3),
        ("4 louvain recovers planted blocks", criterion_4),
        ("5 directional reproduction on sparse-mention scenario", criterion_5),
        ("6 reweighting exactness", criterion_6),
        ("7 probe protocol conformance", criterion_7),
        ("8 end-to-end determinism", criterion_8),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
