//! Acceptance criteria 1-11. Each test prints one `criterion N ... PASS|FAIL` line.
//!
//! Run with `cargo test -p artnet-core --test acceptance`; the lines print even without `--nocapture`.

use std::io::Write;
use std::time::Instant;

use artnet::architectures::{analyze, infer_shapes, ArchName, ArchSpec, Model, TinyVariant, UnitKind, CALIBRATED};
use artnet::autodiff::Graph;
use artnet::blocks::{ParamStore, RelationBranch, ResidualKind, Session, Unit};
use artnet::checkpoint::Checkpoint;
use artnet::data::{generate, generate_range, Dataset, TaskSpec};
use artnet::ops::{ConvSpec, Mode, BN_EPSILON};
use artnet::relation_math::{
    argmax, energy_code, factored_code, mapping_unit_code, phase_response_curve, quadratic_terms, quadrature_pair, FactoredWeights,
    PatchPair,
};
use artnet::training::{evaluate, train, tsn_consensus, tsn_forward, EvalConfig, TrainConfig, TrainState};
use artnet::verify::gradient_suite;
use artnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Written straight to the stderr handle so the line survives libtest's output capture.
fn verdict(n: u32, name: &str, passed: bool, detail: &str) {
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2} {name:<28} {}  {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {n} ({name}) failed: {detail}");
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    m.data()
        .chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

// 1 -------------------------------------------------------------------------

#[test]
fn c01_algebraic_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let trials = 200;
    for _ in 0..trials {
        let nx = rng.random_range(1..=8);
        let ny = rng.random_range(1..=8);
        let f = rng.random_range(1..=6);
        let k = rng.random_range(1..=4);
        let x: Vec<f64> = (0..nx).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..ny).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fw = FactoredWeights::random(nx, ny, f, k, &mut rng).unwrap();
        let pair = PatchPair {
            x: x.clone(),
            y: y.clone(),
        };

        // direct sum over the expanded tensor, written out here
        let (wx, wy, wz) = (fw.wx.data(), fw.wy.data(), fw.wz.data());
        let mut direct = vec![0.0; k];
        for (c, d) in direct.iter_mut().enumerate() {
            for i in 0..nx {
                for j in 0..ny {
                    let w: f64 = (0..f).map(|q| wx[q * nx + i] * wy[q * ny + j] * wz[c * f + q]).sum();
                    *d += w * x[i] * y[j];
                }
            }
        }
        let fac = factored_code(&pair, &fw).unwrap();
        let map = mapping_unit_code(&pair, &fw.expand().unwrap()).unwrap();
        worst = worst.max(max_abs(&fac, &map)).max(max_abs(&fac, &direct));

        if nx == ny {
            let energy = energy_code(&pair, &fw).unwrap();
            let quad = quadratic_terms(&pair, &fw).unwrap();
            let rhs: Vec<f64> = fac.iter().zip(&quad).map(|(a, b)| 2.0 * a + b).collect();
            let (a, b) = (matvec(&fw.wx, &x), matvec(&fw.wy, &y));
            let sq: Vec<f64> = a.iter().zip(&b).map(|(p, q)| (p + q).powi(2)).collect();
            worst = worst.max(max_abs(&energy, &rhs)).max(max_abs(&energy, &matvec(&fw.wz, &sq)));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "algebraic identities",
        worst <= 1e-12 && secs < 5.0,
        &format!("trials={trials} max_abs_error={worst:.2e} tol=1e-12 time={secs:.2}s"),
    );
}

// 2 -------------------------------------------------------------------------

#[test]
fn c02_gradient_suite() {
    let start = Instant::now();
    let checks = gradient_suite(1);
    let secs = start.elapsed().as_secs_f64();
    let names = [
        "conv3d",
        "conv2d_frames",
        "batch_norm",
        "cross_channel_pool",
        "relu",
        "square",
        "smart_block",
    ];
    let covered = names.iter().all(|n| checks.iter().any(|c| c.name == format!("grad.{n}")));
    let worst = checks.iter().map(|c| c.max_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let smart = &checks.iter().find(|c| c.name == "grad.smart_block").unwrap().detail;
    verdict(
        2,
        "gradient checks",
        failed.is_empty() && covered && secs < 60.0,
        &format!(
            "checks={} max_rel_error={worst:.2e} tol=1e-4 smart_block: {smart} failed={failed:?} time={secs:.1}s",
            checks.len()
        ),
    );
}

// 3 -------------------------------------------------------------------------

#[test]
fn c03_shape_trace() {
    let expected = [[56, 56, 8], [56, 56, 8], [28, 28, 4], [14, 14, 2], [7, 7, 1], [1, 1, 1]];
    let mut bad = Vec::new();
    for a in ArchName::ALL {
        let spec = ArchSpec::named(a, 400).unwrap();
        let shapes = infer_shapes(&spec, [16, 112, 112]).unwrap();
        let hwt: Vec<[usize; 3]> = shapes
            .iter()
            .filter(|l| l.layer != "fc")
            .map(|l| [l.shape[2], l.shape[3], l.shape[1]])
            .collect();
        if hwt != expected {
            bad.push(format!("{a}: {hwt:?}"));
        }
    }
    verdict(3, "shape trace", bad.is_empty(), &format!("architectures=6 mismatches={bad:?}"));
}

// 4 -------------------------------------------------------------------------

#[test]
fn c04_params_and_flops() {
    let start = Instant::now();
    let published = [
        (ArchName::C3dR18, 33.37, 19.58),
        (ArchName::ArtnetR18S, 33.39, 19.97),
        (ArchName::ArtnetR18D, 35.20, 23.70),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (a, p, f) in published {
        let stats = analyze(&ArchSpec::named(a, 400).unwrap(), [16, 112, 112], CALIBRATED).unwrap();
        let (dp, df) = (stats.params_millions / p - 1.0, stats.flops_giga / f - 1.0);
        ok &= dp.abs() <= 0.02 && df.abs() <= 0.05;
        parts.push(format!(
            "{a}={:.2}M({:+.2}%)/{:.2}G({:+.2}%)",
            stats.params_millions,
            dp * 100.0,
            stats.flops_giga,
            df * 100.0
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(CALIBRATED.to_string(), "macs,no-bias,bn", "pinned convention changed");
    verdict(
        4,
        "params and FLOPs",
        ok && secs < 1.0,
        &format!("convention={CALIBRATED} {} time={secs:.3}s", parts.join(" ")),
    );
}

// 5 -------------------------------------------------------------------------

fn counted(spec: &ArchSpec) -> (usize, usize) {
    let stem = spec.stem.kind;
    let blocks = spec.block_specs();
    let units = std::iter::once(match stem {
        UnitKind::Smart => (1, 0),
        UnitKind::Relation => (0, 1),
        UnitKind::Conv => (0, 0),
    })
    .chain(blocks.iter().map(|(_, b)| match b.kind {
        ResidualKind::ConvThenSmart => (1, 0),
        ResidualKind::ConvThenRelation => (0, 1),
        ResidualKind::ConvPair => (0, 0),
    }));
    units.fold((0, 0), |(s, r), (a, b)| (s + a, r + b))
}

#[test]
fn c05_structure() {
    let expected = [
        (ArchName::ArtnetR18D, (7, 0)),
        (ArchName::ArtnetR18S, (1, 0)),
        (ArchName::RelationR18D, (0, 7)),
        (ArchName::RelationR18S, (0, 1)),
        (ArchName::C3dR18, (0, 0)),
        (ArchName::C2dR18, (0, 0)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (a, want) in expected {
        let spec = ArchSpec::named(a, 400).unwrap();
        let got = counted(&spec);
        ok &= got == want;
        parts.push(format!("{a}={}/{}", got.0, got.1));
    }
    // the instantiated network must agree with its spec
    let model = Model::new(ArchSpec::named(ArchName::ArtnetR18D, 400).unwrap(), 0).unwrap();
    let built =
        usize::from(model.net.stem.is_smart()) + model.net.blocks.iter().filter(|(_, b)| matches!(b.second, Unit::Smart(_))).count();
    ok &= built == 7;
    verdict(
        5,
        "structural audit",
        ok,
        &format!("smart/relation: {} built_artnet_r18_d={built}", parts.join(" ")),
    );
}

// 6 -------------------------------------------------------------------------

fn overfit_setup() -> (Model, Dataset, TrainConfig) {
    let spec = TaskSpec::default();
    let data = generate(&spec, 32).unwrap();
    let arch = ArchSpec::tiny(TinyVariant::Artnet, 16, spec.channels, spec.classes).unwrap();
    let cfg = TrainConfig {
        max_iters: 2000,
        stop_below: Some(0.05),
        dropout_p: 0.0,
        eval_every: 50,
        seed: 3,
        ..TrainConfig::default()
    };
    (Model::new(arch, 3).unwrap(), data, cfg)
}

#[test]
fn c06_overfit() {
    let start = Instant::now();

    // reproducibility over a short prefix, bitwise
    let mut prefixes = Vec::new();
    for _ in 0..2 {
        let (mut model, data, mut cfg) = overfit_setup();
        cfg.max_iters = 10;
        let mut state = TrainState::new(&model, &cfg);
        let out = train(&mut model, &data, None, &cfg, &mut state, |_| {}).unwrap();
        let losses: Vec<u64> = out.log.iter().map(|r| r.loss.to_bits()).collect();
        let params: Vec<u64> = model
            .store
            .params()
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect();
        prefixes.push((losses, params));
    }
    let reproducible = prefixes[0] == prefixes[1];

    let (mut model, data, cfg) = overfit_setup();
    let mut state = TrainState::new(&model, &cfg);
    let out = train(&mut model, &data, None, &cfg, &mut state, |_| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        "overfit 32 samples",
        out.final_loss < 0.05 && state.iteration <= 2000 && reproducible && secs < 600.0,
        &format!(
            "final_loss={:.4} iterations={} reproducible={reproducible} time={secs:.0}s",
            out.final_loss, state.iteration
        ),
    );
}

// 7 -------------------------------------------------------------------------

fn train_and_test(variant: TinyVariant, train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig) -> f64 {
    let spec = &train_set.spec;
    let arch = ArchSpec::tiny(variant, 16, spec.channels, spec.classes).unwrap();
    let mut model = Model::new(arch, cfg.seed).unwrap();
    let mut state = TrainState::new(&model, cfg);
    train(&mut model, train_set, None, cfg, &mut state, |_| {}).unwrap();
    evaluate(&mut model, test_set, &EvalConfig::for_dataset(test_set)).unwrap().top1
}

#[test]
fn c07_relation_vs_appearance() {
    let start = Instant::now();
    let spec = TaskSpec {
        noise_std: 0.05,
        seed: 11,
        ..TaskSpec::default()
    };
    assert_eq!(spec.directions, 4);
    let train_set = generate(&spec, 512).unwrap();
    let test_set = generate_range(&spec, 512, 256).unwrap();
    let cfg = TrainConfig {
        max_iters: 300,
        eval_every: 50,
        seed: 5,
        ..TrainConfig::default()
    };
    let relation = train_and_test(TinyVariant::Artnet, &train_set, &test_set, &cfg);
    let c2d = train_and_test(TinyVariant::C2d, &train_set, &test_set, &cfg);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        "relation vs per-frame",
        relation >= 0.9 && c2d <= 0.4 && secs < 1800.0,
        &format!("tiny_artnet_top1={relation:.3} (>=0.90) tiny_c2d_top1={c2d:.3} (<=0.40) iters=300 time={secs:.0}s"),
    );
}

// 8 -------------------------------------------------------------------------

#[test]
fn c08_relation_branch_is_energy_model() {
    let (cin, k, codes) = (3, 3, 2);
    let hidden = 2 * codes;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let spec = ConvSpec::new(k, 2, 1, 1, hidden).with_pad(0, 0);
        let branch = RelationBranch::new(&mut store, "r", cin, spec, codes, &mut rng).unwrap();
        // neutral BN: zero mean, unit scale, identity affine
        for st in store.all_stats_mut() {
            st.mean.fill(0.0);
            st.var.fill(1.0 - BN_EPSILON);
        }
        let x = Tensor::uniform(&[1, cin, 2, k, k], -1.0, 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &mut store, Mode::Eval, 0);
        let xi = s.graph.input(x.clone());
        let z = branch.forward(&mut s, xi).unwrap();
        let got = s.graph.value(z).data().to_vec();
        assert_eq!(got.len(), codes);

        // first frame feeds wx, second frame wy; pooling pairs become wz rows of 0.5
        let w = store.get(branch.conv.weight);
        let wx: Vec<f64> = (0..hidden)
            .flat_map(|f| (0..cin).flat_map(move |c| (0..k * k).map(move |p| (f, c, p))))
            .map(|(f, c, p)| w.get(&[f, c, 0, p / k, p % k]))
            .collect();
        let wy: Vec<f64> = (0..hidden)
            .flat_map(|f| (0..cin).flat_map(move |c| (0..k * k).map(move |p| (f, c, p))))
            .map(|(f, c, p)| w.get(&[f, c, 1, p / k, p % k]))
            .collect();
        let mut wz = vec![0.0; codes * hidden];
        for c in 0..codes {
            wz[c * hidden + 2 * c] = 0.5;
            wz[c * hidden + 2 * c + 1] = 0.5;
        }
        let n = cin * k * k;
        let frame = |t: usize| -> Vec<f64> { (0..n).map(|i| x.get(&[0, i / (k * k), t, (i % (k * k)) / k, i % k])).collect() };
        let fw = FactoredWeights::new(
            Tensor::from_vec(&[hidden, n], wx).unwrap(),
            Tensor::from_vec(&[hidden, n], wy).unwrap(),
            Tensor::from_vec(&[codes, hidden], wz).unwrap(),
        )
        .unwrap();
        let want = energy_code(&PatchPair::new(frame(0), frame(1)).unwrap(), &fw).unwrap();
        // the trailing ReLU is inert on non-negative energies
        assert!(want.iter().all(|&v| v >= 0.0));
        worst = worst.max(max_abs(&got, &want));
    }
    verdict(
        8,
        "relation branch = energy",
        worst <= 1e-10,
        &format!("locations=10 max_abs_error={worst:.2e} tol=1e-10"),
    );
}

// 9 -------------------------------------------------------------------------

#[test]
fn c09_phase_response() {
    let len = 24;
    let omega = 2.0 * std::f64::consts::PI / 12.0;
    let fw = quadrature_pair(omega, len).unwrap();
    let shifts: Vec<f64> = (0..25).map(|i| -6.0 + 0.5 * i as f64).collect();
    let base = phase_response_curve(omega, 1.0, &shifts, &fw).unwrap();

    // closed form of the quadrature energy, computed directly
    let oracle: Vec<f64> = shifts
        .iter()
        .map(|&s| {
            let (mut c, mut si) = (0.0, 0.0);
            for i in 0..len {
                let t = i as f64;
                let v = (omega * t).cos() + (omega * (t - s)).cos();
                c += (omega * t).cos() * v;
                si += (omega * t).sin() * v;
            }
            c * c + si * si
        })
        .collect();
    let peak_value = base.iter().cloned().fold(0.0, f64::max);
    let oracle_err = max_abs(&base, &oracle) / peak_value;

    let peak = argmax(&base);
    let mut argmax_stable = shifts[peak.unwrap()] == 0.0;
    let mut scale_err: f64 = 0.0;
    for alpha in [0.1, 0.5, 2.0, 7.0] {
        let r = phase_response_curve(omega, alpha, &shifts, &fw).unwrap();
        argmax_stable &= argmax(&r) == peak;
        for (a, b) in r.iter().zip(&base) {
            scale_err = scale_err.max((a - alpha * alpha * b).abs() / (alpha * alpha * peak_value));
        }
    }
    verdict(
        9,
        "phase response",
        argmax_stable && scale_err <= 1e-12 && oracle_err <= 1e-12,
        &format!("argmax_invariant={argmax_stable} alpha2_rel_error={scale_err:.2e} closed_form_error={oracle_err:.2e}"),
    );
}

// 10 ------------------------------------------------------------------------

#[test]
fn c10_tsn_consensus() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let segs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng).unwrap()).collect();
    let weights = Tensor::uniform(&[2, 4], 0.5, 1.5, &mut rng).unwrap();

    let run = |order: &[usize]| -> (Tensor, Vec<Tensor>, Tensor) {
        let mut g = Graph::new();
        let ids: Vec<_> = order.iter().map(|&i| g.param(segs[i].clone())).collect();
        let c = tsn_consensus(&mut g, &ids).unwrap();
        let w = g.input(weights.clone());
        let p = g.mul(c, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        let grads = ids.iter().map(|&i| g.grad(i).unwrap().clone()).collect();
        (g.value(c).clone(), grads, weights.clone())
    };
    let (fwd, grads, consensus_grad) = run(&[0, 1, 2]);
    let (perm, _, _) = run(&[2, 0, 1]);
    let perm_err = fwd.max_abs_diff(&perm).unwrap();
    let grad_err = grads
        .iter()
        .map(|g| g.max_abs_diff(&consensus_grad.scale(1.0 / 3.0)).unwrap())
        .fold(0.0, f64::max);

    // one segment is the plain forward pass
    let spec = TaskSpec::default();
    let data = generate(&spec, 2).unwrap();
    let (x, _) = data.batch(&[0, 1]).unwrap();
    let mut model = Model::new(ArchSpec::tiny(TinyVariant::Artnet, 4, 1, 4).unwrap(), 0).unwrap();
    let plain = model.logits(&x, Mode::Eval, 0).unwrap();
    let mut store = model.store.clone();
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &mut store, Mode::Eval, 0);
    let xi = s.graph.input(x.clone());
    let y = tsn_forward(&model, &mut s, &[xi]).unwrap();
    let single_err = s.graph.value(y).max_abs_diff(&plain).unwrap();

    verdict(
        10,
        "TSN consensus",
        perm_err <= 1e-15 && grad_err <= 1e-15 && single_err == 0.0,
        &format!("single_segment_error={single_err:.1e} permutation_error={perm_err:.1e} grad_split_error={grad_err:.1e}"),
    );
}

// 11 ------------------------------------------------------------------------

#[test]
fn c11_round_trips_and_determinism() {
    let spec = TaskSpec {
        seed: 9,
        ..TaskSpec::default()
    };
    let data = generate(&spec, 12).unwrap();
    let mut a = Vec::new();
    data.write_to(&mut a).unwrap();
    let reread = Dataset::read_from(&mut a.as_slice()).unwrap();
    let mut b = Vec::new();
    reread.write_to(&mut b).unwrap();
    let dataset_ok = a == b && reread.samples.iter().map(|s| s.label).eq(data.samples.iter().map(|s| s.label));

    let cfg = TrainConfig {
        max_iters: 8,
        batch_size: 4,
        eval_every: 4,
        seed: 2,
        ..TrainConfig::default()
    };
    let run = |iters: &[usize]| -> (Model, TrainState) {
        let arch = ArchSpec::tiny(TinyVariant::Artnet, 4, 1, 4).unwrap();
        let mut model = Model::new(arch, 1).unwrap();
        let mut state = TrainState::new(&model, &cfg);
        for &m in iters {
            let c = TrainConfig {
                max_iters: m,
                ..cfg.clone()
            };
            train(&mut model, &data, None, &c, &mut state, |_| {}).unwrap();
        }
        (model, state)
    };
    let bits = |m: &Model| -> Vec<u64> {
        m.store
            .params()
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let (m1, s1) = run(&[8]);
    let (m2, _) = run(&[8]);
    let (m3, _) = run(&[3, 8]);
    let training_ok = bits(&m1) == bits(&m2) && bits(&m1) == bits(&m3);

    let ck = Checkpoint::from_model(&m1, CALIBRATED, Some(&s1));
    let mut c1 = Vec::new();
    ck.write_to(&mut c1).unwrap();
    let back = Checkpoint::read_from(&mut c1.as_slice()).unwrap();
    let mut c2 = Vec::new();
    back.write_to(&mut c2).unwrap();
    let mut c3 = Vec::new();
    Checkpoint::from_model(&back.to_model().unwrap(), CALIBRATED, Some(&back.train_state(&m1, &cfg)))
        .write_to(&mut c3)
        .unwrap();
    let checkpoint_ok = c1 == c2 && c1 == c3 && back.iteration == 8;

    verdict(
        11,
        "round trips and determinism",
        dataset_ok && training_ok && checkpoint_ok,
        &format!(
            "dataset_bytes={} checkpoint_bytes={} dataset={dataset_ok} checkpoint={checkpoint_ok} seeded_training={training_ok}",
            a.len(),
            c1.len()
        ),
    );
}
