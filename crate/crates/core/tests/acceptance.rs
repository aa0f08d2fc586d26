//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{dense_reference, msa_params, rand_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use searth::attention::{window_msa, StageGeometry};
use searth::evaluation::{acc, compute_climatology, normalized_diff, rmse, skillful_lead_time, MetricKind};
use searth::geometry::{block_mean, earth_attention_mask, latitude_weights, regrid_quarter_to_one};
use searth::gradcheck::{model_gradcheck, primitive_suite};
use searth::io::synth::{generate, SynthConfig};
use searth::model::{probe_boundary_shapes, StageShapes};
use searth::training::{
    finetune_ar, finetune_rar, one_step_wmae, persistence_wmae, pretrain, rollout_loss, Dataset, LrSchedule,
    StageEvent, TrainConfig, TrainState, UpdateCadence,
};
use searth::{backward, Graph, LatLonGrid, MaskMode, Model, ModelConfig, NormStats, Precision, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b)
}

fn field(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Tensor<f64> {
    Tensor::from_fn(vec![c.n_channels, c.n_lat, c.n_lon], |_| rng.random_range(-1.0..1.0))
}

fn normalized(synth: &SynthConfig, stats_frames: Option<usize>) -> (Vec<Tensor<f64>>, Vec<f64>) {
    let raw = generate(synth).unwrap();
    let stats = NormStats::from_fields(&raw[..stats_frames.unwrap_or(raw.len())]).unwrap();
    (
        raw.iter().map(|f| stats.normalize(f)).collect(),
        synth.grid().unwrap().weights(),
    )
}

fn toy_dataset(steps: usize, seed: u64) -> Dataset<f64> {
    let cfg = ModelConfig::toy();
    let (frames, w) = normalized(
        &SynthConfig::random(cfg.n_lat, cfg.n_lon, cfg.n_channels, steps, 3, seed),
        None,
    );
    Dataset::new(frames, w).unwrap()
}

// 1 -------------------------------------------------------------------------

/// Pole-seam predicate: after rolling by `sh`, shifted index `i` holds
/// original index `(i + sh) mod n`, which wrapped iff `i >= n - sh`.
fn wrapped(i: usize, n: usize, sh: usize) -> bool {
    i >= n - sh
}

fn mask_oracle() -> Outcome {
    let sizes = [4, 6, 8, 12, 16];
    let mut configs = 0;
    for h in sizes {
        for w in sizes {
            for win in [2, 3, 4] {
                if h % win != 0 || w % win != 0 {
                    continue;
                }
                let sh = win / 2;
                let earth = earth_attention_mask(h, w, win, win, sh, sh, MaskMode::Earth).unwrap();
                let planar = earth_attention_mask(h, w, win, win, sh, sh, MaskMode::Planar).unwrap();
                let layout = earth.layout();
                let t = layout.tokens();
                let mut want_earth = BTreeSet::new();
                let mut want_planar = BTreeSet::new();
                let mut lon_only = BTreeSet::new();
                for win_idx in 0..layout.num_windows() {
                    for q in 0..t {
                        for k in 0..t {
                            let ((iq, jq), (ik, jk)) = (layout.cell(win_idx, q), layout.cell(win_idx, k));
                            let rows = wrapped(iq, h, sh) != wrapped(ik, h, sh);
                            let cols = wrapped(jq, w, sh) != wrapped(jk, w, sh);
                            if rows {
                                want_earth.insert((win_idx, q, k));
                            }
                            if rows || cols {
                                want_planar.insert((win_idx, q, k));
                            }
                            if cols && !rows {
                                lon_only.insert((win_idx, q, k));
                            }
                        }
                    }
                }
                let (got_e, got_p) = (earth.blocked_set(), planar.blocked_set());
                if got_e != want_earth || got_p != want_planar {
                    return Err(format!("mismatch at H={h} W={w} win={win}"));
                }
                let diff: BTreeSet<_> = got_p.difference(&got_e).copied().collect();
                if !got_e.is_subset(&got_p) || diff.is_empty() || diff != lon_only {
                    return Err(format!("planar/earth relation broken at H={h} W={w} win={win}"));
                }
                configs += 1;
            }
        }
    }
    Ok(format!("{configs} geometries entry-exact"))
}

// 2 -------------------------------------------------------------------------

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (wh, ww) = (rng.random_range(1..=3), rng.random_range(2..=3));
        let (h, w) = (wh * rng.random_range(1..=3), ww * rng.random_range(2..=3));
        let nh = rng.random_range(1..=2);
        let d = nh * rng.random_range(1..=3);
        let mode = if rng.random_bool(0.5) {
            MaskMode::Earth
        } else {
            MaskMode::Planar
        };
        let masked = rng.random_bool(0.75);
        let g = Graph::new();
        let geo = StageGeometry::<f64>::half_shift(h, w, wh, ww, mode).unwrap();
        let p = msa_params(&g, &mut rng, d, nh, (2 * wh - 1) * (2 * ww - 1));
        let x = rand_tensor(&mut rng, &[h, w, d], 1.0);
        let got = window_msa(&g.constant(x.clone()), &p, &geo, masked).unwrap();
        worst = worst.max(max_abs_diff(got.value(), &dense_reference(&x, &p, &geo, masked)));
    }
    check(worst <= 1e-6, format!("max |Δ| = {worst:.3e} over 50 triples"))
}

// 3, 4 ----------------------------------------------------------------------

fn roll_violation(mode: MaskMode, seed: u64, axis: usize, shift: isize) -> f64 {
    let cfg = ModelConfig {
        mask_mode: mode,
        ..ModelConfig::toy()
    };
    let model = Model::<f64>::random(cfg.clone(), seed, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (a, b) = (field(&mut rng, &cfg), field(&mut rng, &cfg));
    let roll = |t: &Tensor<f64>| t.roll(axis, shift).unwrap();
    let plain = model.rollout(&a, &b, 1).unwrap().remove(0);
    let rolled = model.rollout(&roll(&a), &roll(&b), 1).unwrap().remove(0);
    max_abs_diff(&roll(&plain), &rolled)
}

fn zonal_equivariance() -> Outcome {
    let cfg = ModelConfig::toy();
    let step = 4 * cfg.window.1;
    let shifts: Vec<isize> = (1..)
        .map(|m| (m * step) as isize)
        .take_while(|&s| (s as usize) < cfg.n_lon)
        .collect();
    let (mut earth_worst, mut planar_breaks) = (0.0f64, 0);
    for draw in 0..10u64 {
        let shift = shifts[draw as usize % shifts.len()];
        earth_worst = earth_worst.max(roll_violation(MaskMode::Earth, draw, 2, shift));
        planar_breaks += usize::from(roll_violation(MaskMode::Planar, draw, 2, shift) > 1e-3);
    }
    check(
        earth_worst <= 1e-8 && planar_breaks >= 9,
        format!("shifts {shifts:?}: earth max |Δ| = {earth_worst:.2e}, planar violations {planar_breaks}/10"),
    )
}

fn meridional_boundary() -> Outcome {
    let shift = ModelConfig::toy().window.0 as isize;
    let breaks = (0..10u64)
        .filter(|&d| roll_violation(MaskMode::Earth, 100 + d, 1, shift) > 1e-3)
        .count();
    check(
        breaks >= 9,
        format!("earth violations under a {shift}-row roll: {breaks}/10"),
    )
}

// 5 -------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let suite = primitive_suite(7).unwrap();
    let (name, worst) = suite
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    let model = model_gradcheck(&ModelConfig::toy(), Some(100), 7).unwrap();
    check(
        worst <= 1e-4 && model.max_rel_error <= 1e-4,
        format!(
            "{} primitives, worst {name} {worst:.2e}; toy forward+loss {:.2e} over 100 coordinates",
            suite.len(),
            model.max_rel_error
        ),
    )
}

// 6, 7, 8 -------------------------------------------------------------------

fn fine_cfg(iters: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        iters,
        lr_initial: 1e-3,
        lr_final: 1e-4,
        schedule: LrSchedule::Cosine,
        weight_decay: 0.01,
        seed: 13,
        ..TrainConfig::pretrain_default()
    }
}

fn toy_state(seed: u64) -> TrainState<f64> {
    TrainState::new(Model::init(ModelConfig::toy(), seed).unwrap())
}

fn rar_degeneracy() -> Outcome {
    let data = toy_dataset(24, 6);
    let tc = fine_cfg(3, 2);
    let mut ar = toy_state(1);
    finetune_ar(&mut ar, &data, 4, &tc).unwrap();
    let mut worst = 0.0f64;
    for cadence in [UpdateCadence::PerStage, UpdateCadence::PerSequence] {
        let mut rar = toy_state(1);
        finetune_rar(&mut rar, &data, 4, 1, cadence, &tc, None).unwrap();
        let d = ar
            .model
            .params
            .flatten()
            .iter()
            .zip(rar.model.params.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(d);
    }
    let moved = ar.model != toy_state(1).model;
    check(
        worst <= 1e-10 && moved,
        format!("max |Δθ| = {worst:.2e} under both cadences"),
    )
}

fn detachment() -> Outcome {
    let data = toy_dataset(24, 7);
    let tc = fine_cfg(1, 2);
    let mut state = toy_state(2);
    let (mut worst, mut leaks, mut events) = (0.0f64, 0usize, 0usize);
    let mut observer = |e: &StageEvent<'_, f64>| {
        events += 1;
        leaks += usize::from(e.upstream_gradient);
        let model = Model {
            config: ModelConfig::toy(),
            params: e.params.clone(),
        };
        let mut recomputed: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        for (b, (x0, x1)) in e.inputs.iter().enumerate() {
            let g = Graph::new();
            let bound = model.bind(&g, true).unwrap();
            let (loss, _, _) = rollout_loss(
                &bound,
                g.constant(x0.clone()),
                g.constant(x1.clone()),
                e.targets[b],
                &data.weights,
                None,
            )
            .unwrap();
            let scale = 1.0 / e.inputs.len() as f64;
            for (n, t) in backward(loss.scale(scale)).unwrap().into_named() {
                match recomputed.get_mut(&n) {
                    Some(acc) => acc.add_assign(&t).unwrap(),
                    None => {
                        recomputed.insert(n, t);
                    }
                }
            }
        }
        for (n, g) in e.grads {
            worst = worst.max(max_abs_diff(g, &recomputed[n]));
        }
    };
    finetune_rar(
        &mut state,
        &data,
        2,
        3,
        UpdateCadence::PerStage,
        &tc,
        Some(&mut observer),
    )
    .unwrap();
    check(
        worst <= 1e-12 && leaks == 0 && events == 3,
        format!("{events} stages, max |Δg| = {worst:.2e}, upstream leaks {leaks}"),
    )
}

fn memory_decoupling() -> Outcome {
    let data = toy_dataset(40, 8);
    let tc = fine_cfg(1, 1);
    let rar: Vec<usize> = [1, 2, 4, 8]
        .iter()
        .map(|&m| {
            finetune_rar(&mut toy_state(3), &data, 4, m, UpdateCadence::PerStage, &tc, None)
                .unwrap()
                .peak_live_nodes
        })
        .collect();
    let ar: Vec<usize> = [4, 8, 16, 32]
        .iter()
        .map(|&n| finetune_ar(&mut toy_state(3), &data, n, &tc).unwrap().peak_live_nodes)
        .collect();
    let (lo, hi) = (*rar.iter().min().unwrap() as f64, *rar.iter().max().unwrap() as f64);
    let spread = hi / lo - 1.0;
    let growth_ok = [4, 8, 16, 32]
        .iter()
        .zip(&ar)
        .all(|(&n, &p)| p as f64 >= 0.8 * (n as f64 / 4.0) * ar[0] as f64);
    check(
        spread < 0.05 && growth_ok,
        format!("RAR k=4 peaks {rar:?} (spread {:.2}%), AR peaks {ar:?}", 100.0 * spread),
    )
}

// 9 -------------------------------------------------------------------------

fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = LatLonGrid::cell_centered(16, 32).unwrap();
    let w = grid.weights();
    let ys: Vec<Tensor<f64>> = (0..5)
        .map(|_| Tensor::from_fn(vec![2, 16, 32], |_| rng.random_range(-3.0..3.0)))
        .collect();
    let clim = compute_climatology(&ys[..3], "first three").unwrap();
    let mut errors = Vec::new();
    for c in 0..2 {
        let r = rmse(&ys, &ys, &w, c).unwrap();
        let a = acc(&ys, &ys, &clim, &w, c).unwrap().value;
        if r != 0.0 || a != 1.0 {
            errors.push(format!("channel {c}: rmse {r}, acc {a}"));
        }
    }
    for g in [
        grid,
        LatLonGrid::cell_centered(7, 4).unwrap(),
        LatLonGrid::one_degree_from_quarter(),
    ] {
        let s: f64 = latitude_weights(g.latitudes()).unwrap().iter().sum();
        if (s - g.n_lat() as f64).abs() > 1e-9 {
            errors.push(format!("Σ L = {s} for {} rows", g.n_lat()));
        }
    }
    let d1 = normalized_diff(1.8, 2.0, MetricKind::Rmse).unwrap();
    let d2 = normalized_diff(0.7, 0.6, MetricKind::Acc).unwrap();
    if (d1 + 0.10).abs() > 1e-12 || (d2 - 0.25).abs() > 1e-12 {
        errors.push(format!("normalized diffs {d1}, {d2}"));
    }
    let lead = skillful_lead_time(&[(1.0, 0.9), (2.0, 0.7), (3.0, 0.5)], 0.6).unwrap();
    if (lead.value - 2.5).abs() > 1e-12 || lead.censored {
        errors.push(format!("skillful lead {lead:?}"));
    }
    check(
        errors.is_empty(),
        if errors.is_empty() {
            format!("diffs {d1:+.2} {d2:+.2}, lead {} d", lead.value)
        } else {
            errors.join("; ")
        },
    )
}

// 10, 11 --------------------------------------------------------------------

struct Split {
    train: Dataset<f32>,
    val: Dataset<f32>,
}

fn trend_split(seed: u64) -> Split {
    let synth = SynthConfig::random(16, 32, 4, 360, 3, 100 + seed);
    let (frames, w) = normalized(&synth, Some(300));
    let frames: Vec<Tensor<f32>> = frames.iter().map(|f| f.cast::<f32>()).collect();
    Split {
        train: Dataset::new(frames[..300].to_vec(), w.clone()).unwrap(),
        val: Dataset::new(frames[300..].to_vec(), w).unwrap(),
    }
}

fn pretrained(split: &Split, mode: MaskMode, seed: u64) -> Model<f32> {
    let cfg = ModelConfig {
        mask_mode: mode,
        precision: Precision::F32,
        ..ModelConfig::toy()
    };
    let tc = TrainConfig {
        batch_size: 1,
        iters: 2000,
        lr_initial: 1e-3,
        lr_final: 1e-5,
        schedule: LrSchedule::Cosine,
        weight_decay: 0.01,
        seed,
        ..TrainConfig::pretrain_default()
    };
    let mut s = TrainState::new(Model::<f32>::init(cfg, seed).unwrap());
    pretrain(&mut s, &split.train, &tc).unwrap();
    s.model
}

/// Channel-mean latitude-weighted RMSE at `lead` steps, rollouts starting at
/// every other validation frame.
fn lead_rmse(model: &Model<f32>, val: &Dataset<f32>, lead: usize) -> f64 {
    let (mut f, mut y) = (Vec::new(), Vec::new());
    for s in (0..val.frames.len() - lead - 1).step_by(2) {
        f.push(
            model
                .rollout(&val.frames[s], &val.frames[s + 1], lead)
                .unwrap()
                .pop()
                .unwrap(),
        );
        y.push(val.frames[s + 1 + lead].clone());
    }
    let c = model.config.n_channels;
    (0..c).map(|ch| rmse(&f, &y, &val.weights, ch).unwrap()).sum::<f64>() / c as f64
}

struct TrendRuns {
    splits: Vec<Split>,
    earth: Vec<Model<f32>>,
    planar: Vec<Model<f32>>,
}

fn trend_runs() -> TrendRuns {
    let mut runs = TrendRuns {
        splits: Vec::new(),
        earth: Vec::new(),
        planar: Vec::new(),
    };
    for seed in 0..3 {
        let split = trend_split(seed);
        runs.earth.push(pretrained(&split, MaskMode::Earth, seed));
        runs.planar.push(pretrained(&split, MaskMode::Planar, seed));
        runs.splits.push(split);
    }
    runs
}

fn learning_trend(runs: &TrendRuns) -> Outcome {
    let (mut earth, mut planar, mut persist) = (Vec::new(), Vec::new(), Vec::new());
    for (i, split) in runs.splits.iter().enumerate() {
        earth.push(one_step_wmae(&runs.earth[i], &split.val).unwrap());
        planar.push(one_step_wmae(&runs.planar[i], &split.val).unwrap());
        persist.push(persistence_wmae(&split.val).unwrap());
    }
    let (e, p, b) = (median(earth.clone()), median(planar.clone()), median(persist));
    check(
        e < b && e < p,
        format!(
            "median val wMAE: earth {e:.5}, planar {p:.5}, persistence {b:.5}; earth {earth:.5?} planar {planar:.5?}"
        ),
    )
}

fn horizon_trend(runs: &TrendRuns) -> Outcome {
    let k = 2;
    let leads = [2 * k, 4 * k];
    let mut table: Vec<[Vec<f64>; 3]> = leads.iter().map(|_| Default::default()).collect();
    for (seed, split) in runs.splits.iter().enumerate() {
        let base = TrainState::new(runs.earth[seed].clone());
        let fc = TrainConfig {
            batch_size: 4,
            iters: 150,
            lr_initial: 3e-6,
            lr_final: 3e-6,
            schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            seed: seed as u64,
            ..TrainConfig::pretrain_default()
        };
        let mut models = vec![base.model.clone()];
        for m in [1, 4] {
            let mut s = base.clone();
            finetune_rar(&mut s, &split.train, k, m, UpdateCadence::PerStage, &fc, None).unwrap();
            models.push(s.model);
        }
        for (li, &lead) in leads.iter().enumerate() {
            for (mi, model) in models.iter().enumerate() {
                table[li][mi].push(lead_rmse(model, &split.val, lead));
            }
        }
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for (li, &lead) in leads.iter().enumerate() {
        let [pre, r1, r4] = table[li].clone().map(median);
        ok &= r4 <= r1 && r1 <= pre;
        parts.push(format!("lead {lead}: RAR4 {r4:.5} RAR1 {r1:.5} pretrained {pre:.5}"));
    }
    check(ok, parts.join("; "))
}

// 12 ------------------------------------------------------------------------

fn full_shapes() -> Outcome {
    let cfg = ModelConfig::full();
    let shapes = probe_boundary_shapes::<f32>(&cfg, 0).unwrap();
    let want = StageShapes {
        embed: [768, 90, 180],
        core: [1536, 45, 90],
        output: [69, 180, 360],
    };
    let n = cfg.param_count();
    let within = (n as f64 - 600e6).abs() <= 0.2 * 600e6;
    check(shapes == want && within, format!("shapes {shapes:?}, {n} parameters"))
}

// 13 ------------------------------------------------------------------------

fn regrid() -> Outcome {
    let constant = Tensor::<f64>::full(vec![2, 721, 1440], -1.25);
    let out = regrid_quarter_to_one(&constant).unwrap();
    let shape_ok = out.shape() == [2, 180, 360];
    let const_ok = out.data().iter().all(|&v| v == -1.25);
    let rows = Tensor::<f64>::from_fn(vec![8, 6], |i| (i / 6) as f64);
    let bm = block_mean(&rows, 8, 2).unwrap();
    let ramp = Tensor::<f64>::from_fn(vec![721, 1440], |i| (i / 1440) as f64);
    let coarse = regrid_quarter_to_one(&ramp).unwrap();
    let bm_ok = (0..4).all(|r| bm.get(&[r, 0]) == 2.0 * r as f64 + 0.5)
        && (0..180).all(|r| (0..360).all(|c| coarse.get(&[r, c]) == 4.0 * r as f64 + 1.5));
    check(
        shape_ok && const_ok && bm_ok,
        format!(
            "{:?} → {:?}; constant kept; row r = 4r + 1.5",
            constant.shape(),
            out.shape()
        ),
    )
}

// 14 ------------------------------------------------------------------------

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_searth"))
        .args(args)
        .env_remove("SEARTH_SEED")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file of a run directory except the wall-clock run log.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.file_name().unwrap() != "runs.jsonl")
        .map(|f| {
            (
                f.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&f).unwrap(),
            )
        })
        .collect()
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    cli(&[
        "gen-data",
        "--out",
        p(&data),
        "--grid",
        "8x8",
        "--channels",
        "2",
        "--steps",
        "40",
        "--seed",
        "3",
    ]);
    let train = [
        "--data",
        p(&data),
        "--preset",
        "tiny",
        "--iters",
        "8",
        "--droppath",
        "0.2",
        "--range",
        "0:30",
        "--seed",
        "4",
    ];
    let run = |name: &str, extra: &[&str]| {
        let out = d.join(name);
        let mut args = vec!["pretrain", "--out", p(&out)];
        args.extend(train);
        args.extend(extra);
        cli(&args);
        let metrics = d.join(format!("{name}.csv"));
        cli(&[
            "evaluate",
            "--ckpt",
            p(&out),
            "--data",
            p(&data),
            "--range",
            "30:40",
            "--leads",
            "6,12,18",
            "--out-csv",
            p(&metrics),
        ]);
        let svg = d.join(format!("{name}.svg"));
        cli(&["plot", "--metrics", p(&metrics), "--labels", "run", "--out", p(&svg)]);
        (
            snapshot(&out),
            std::fs::read(metrics).unwrap(),
            std::fs::read(svg).unwrap(),
        )
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let identical = a == b;
    let files: Vec<&String> = a.0.keys().collect();

    let half = d.join("half");
    let mut args = vec!["pretrain", "--out", p(&half), "--stop-after", "4"];
    args.extend(train);
    cli(&args);
    let resumed = d.join("resumed");
    cli(&[
        "pretrain",
        "--ckpt",
        p(&half),
        "--out",
        p(&resumed),
        "--data",
        p(&data),
        "--range",
        "0:30",
        "--iters",
        "8",
        "--seed",
        "4",
    ]);
    let log = |dir: &Path| std::fs::read_to_string(dir.join("loss.csv")).unwrap();
    let joined = log(&half) + log(&resumed).split_once('\n').unwrap().1;
    let params = |dir: &Path| std::fs::read(dir.join(searth::io::checkpoint::PARAMS_FILE)).unwrap();
    let resume_ok = joined == log(&d.join("a")) && params(&resumed) == params(&d.join("a"));
    check(
        identical && resume_ok,
        format!("bit-identical {files:?}, metrics and SVG: {identical}; resume-equivalent: {resume_ok}"),
    )
}

// ---------------------------------------------------------------------------

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome, failures: &mut usize) {
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = t.elapsed().as_secs_f64();
    match result {
        Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL {id:>2} {name}: {detail} [{secs:.1}s]");
        }
    }
}

fn main() {
    let mut failures = 0;
    let f = &mut failures;
    run(1, "mask oracle", mask_oracle, f);
    run(2, "attention oracle", attention_oracle, f);
    run(3, "zonal equivariance", zonal_equivariance, f);
    run(4, "meridional boundary", meridional_boundary, f);
    run(5, "gradient correctness", gradient_correctness, f);
    run(6, "relay degeneracy", rar_degeneracy, f);
    run(7, "detachment", detachment, f);
    run(8, "memory decoupling", memory_decoupling, f);
    run(9, "metric identities", metric_identities, f);
    let t = Instant::now();
    let runs = catch_unwind(trend_runs).ok();
    println!(
        "     pretrained 3 seeds x 2 mask modes in {:.0}s",
        t.elapsed().as_secs_f64()
    );
    let missing = || Err::<String, _>("pretraining failed".to_string());
    match &runs {
        Some(r) => {
            run(10, "learning trend", || learning_trend(r), f);
            run(11, "relay horizon trend", || horizon_trend(r), f);
        }
        None => {
            run(10, "learning trend", missing, f);
            run(11, "relay horizon trend", missing, f);
        }
    }
    run(12, "full-scale shapes", full_shapes, f);
    run(13, "regrid", regrid, f);
    run(14, "reproducibility", reproducibility, f);
    println!("{} of 14 criteria passed", 14 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
