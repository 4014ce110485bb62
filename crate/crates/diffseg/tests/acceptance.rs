//! One PASS/FAIL line per acceptance criterion. Every tolerance and time
//! budget is pinned below. The desk-scale experiment (9 and 10) is judged
//! from sweep tables in `$DIFFSEG_EXPERIMENT_DIR` when that is set.

#![allow(clippy::needless_range_loop)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use diffseg::report;
use diffseg_core::bitcodec::{class_probabilities, decode_map, encode_bits, encode_map, Encoding, EncodingKind};
use diffseg_core::diffusion::{
    ancestral_step, loss_and_grad, noisy_batch, prediction_to_x, sample, v_target, x_from_eps, x_from_v, Denoiser,
    PredictionType, SamplerConfig,
};
use diffseg_core::metrics::{ari, solve_assignment};
use diffseg_core::nn::{NetConfig, UNet};
use diffseg_core::palette::PaletteGrid;
use diffseg_core::rng::{self, Rng};
use diffseg_core::schedule::{LossWeighting, NoiseSchedule};
use diffseg_core::{LabelMap, Tensor};
use rand::Rng as _;

const PROB_TOL: f64 = 1e-12;
const SNR_REL_TOL: f64 = 1e-9;
const PARAM_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const MIN_GRAD_PARAMS: usize = 20;
const INPUT_SCALES: [f64; 5] = [0.02, 0.05, 0.1, 0.5, 1.0];
const ENV_DIR: &str = "DIFFSEG_EXPERIMENT_DIR";

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_map(r: &mut Rng, h: usize, w: usize, labels: u32) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| r.random_range(0..labels)).collect()).unwrap()
}

fn gray_adjacency() -> Outcome {
    let mut pairs = 0;
    for n in [2u32, 4, 6] {
        let grid = PaletteGrid::similar(n).map_err(err)?;
        let side = grid.side();
        ensure(side * side == 1 << n, || format!("n={n}: side {side}"))?;
        let mut seen = vec![false; 1 << n];
        for r in 0..side {
            for c in 0..side {
                let code = grid.code(r, c);
                ensure(!seen[code as usize], || format!("n={n}: code {code} repeated"))?;
                seen[code as usize] = true;
                for (rr, cc) in [(r + 1, c), (r, c + 1)] {
                    if rr < side && cc < side {
                        let d = (code ^ grid.code(rr, cc)).count_ones();
                        ensure(d == 1, || format!("n={n}: ({r},{c})-({rr},{cc}) differ in {d} bits"))?;
                        pairs += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{pairs} neighbour pairs at distance 1"))
}

fn class_probability_examples() -> Outcome {
    let dist = class_probabilities(&[0.0; 4]).map_err(err)?;
    let worst = dist.probs().iter().map(|p| (p - 1.0 / 16.0).abs()).fold(0.0, f64::max);
    ensure(dist.probs().len() == 16 && worst <= PROB_TOL, || format!("zero activations: max error {worst:e}"))?;
    let mut cases = 0;
    let mut worst_mid: f64 = 0.0;
    for a in 0..16u32 {
        for bit in 0..4 {
            let b = a ^ (1 << bit);
            let (ea, eb) = (encode_bits(a, 4).map_err(err)?, encode_bits(b, 4).map_err(err)?);
            let mid: Vec<f64> = ea.iter().zip(&eb).map(|(x, y)| (x + y) / 2.0).collect();
            let dist = class_probabilities(&mid).map_err(err)?;
            for (c, &p) in dist.probs().iter().enumerate() {
                let want = if c as u32 == a || c as u32 == b { 0.5 } else { 0.0 };
                worst_mid = worst_mid.max((p - want).abs());
            }
            cases += 1;
        }
    }
    ensure(worst_mid <= PROB_TOL, || format!("midpoints: max error {worst_mid:e}"))?;
    Ok(format!("uniform max error {worst:e}; {cases} midpoints max error {worst_mid:e}; tol {PROB_TOL:e}"))
}

fn snr_identity() -> Outcome {
    let base = NoiseSchedule::cosine();
    let mut worst: f64 = 0.0;
    for b in INPUT_SCALES {
        let s = NoiseSchedule::scaled(b).map_err(err)?;
        for k in 1..=99 {
            let t = k as f64 / 100.0;
            let want = b * base.snr(t).map_err(err)?;
            let got = s.snr(t).map_err(err)?;
            worst = worst.max(((got - want) / want).abs());
        }
    }
    ensure(worst <= SNR_REL_TOL, || format!("max relative error {worst:e}"))?;
    Ok(format!("99 x {} points, max relative error {worst:e}, tol {SNR_REL_TOL:e}", INPUT_SCALES.len()))
}

fn parameterisations() -> Outcome {
    let mut r = rng::keyed(4, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let sched = NoiseSchedule::scaled(INPUT_SCALES[r.random_range(0..INPUT_SCALES.len())]).map_err(err)?;
        let t: f64 = r.random_range(0.0..1.0);
        let x0 = [r.random_range(-1.0..=1.0)];
        let mut eps = [0.0f64];
        rng::fill_normal(&mut r, &mut eps);
        let (alpha, sigma) = sched.coefficients(t).map_err(err)?;
        let x_t = [alpha * x0[0] + sigma * eps[0]];
        let v = [alpha * eps[0] - sigma * x0[0]];
        let a = x_from_eps(&x_t, &eps, t, &sched).map_err(err)?[0];
        let b = x_from_v(&x_t, &v, t, &sched).map_err(err)?[0];
        worst = worst.max((a - x0[0]).abs()).max((b - x0[0]).abs());
    }
    ensure(worst <= PARAM_TOL, || format!("max error {worst:e}"))?;
    let sched = NoiseSchedule::scaled(0.1).map_err(err)?;
    let (x0, eps) = ([0.7, -1.0, 0.25], [-0.3, 1.9, 0.0]);
    ensure(v_target(&x0, &eps, 0.0, &sched).map_err(err)? == eps, || "v at t=0 is not eps".into())?;
    let neg: Vec<f64> = x0.iter().map(|x| -x).collect();
    ensure(v_target(&x0, &eps, 1.0, &sched).map_err(err)? == neg, || "v at t=1 is not -x0".into())?;
    Ok(format!("10^4 draws, max error {worst:e}, tol {PARAM_TOL:e}; v endpoints exact"))
}

fn codec_round_trips() -> Outcome {
    let mut checked = 0;
    let mut encodings = Vec::new();
    for n in 1..=8 {
        encodings.push(Encoding::analog_bits(n).map_err(err)?);
    }
    for n in 2..=64 {
        encodings.push(Encoding::new(EncodingKind::OneHot, n).map_err(err)?);
    }
    for n in 1..=64 {
        encodings.push(Encoding::new(EncodingKind::Rgb, n).map_err(err)?);
    }
    for enc in encodings {
        for class in 0..enc.n_classes {
            let v = enc.encode::<f64>(class).map_err(err)?;
            let back = enc.decode(&v).map_err(err)?;
            ensure(back == class, || format!("{enc:?}: {class} decoded as {back}"))?;
            checked += 1;
        }
        let n = enc.n_classes as usize;
        let map = LabelMap::new(1, n, (0..n as u32).collect()).map_err(err)?;
        let tensor: Tensor<f32> = encode_map(&map, &enc).map_err(err)?;
        let back = decode_map(&tensor, 0, &enc).map_err(err)?;
        ensure(back == map, || format!("{enc:?}: label map round trip differs"))?;
    }
    Ok(format!("{checked} classes over bits 1..8, one-hot 2..64, rgb 1..64"))
}

/// ARI from raw pair counts, as an exact fraction.
fn ari_by_pairs(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len();
    let (mut both, mut in_a, mut in_b) = (0i128, 0i128, 0i128);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            in_a += sa as i128;
            in_b += sb as i128;
            both += (sa && sb) as i128;
        }
    }
    let pairs = (n * (n - 1) / 2) as i128;
    let num = 2 * (both * pairs - in_a * in_b);
    let den = (in_a + in_b) * pairs - 2 * in_a * in_b;
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Best total weight over all ways to give each row of the shorter side a
/// distinct column.
fn best_by_enumeration(w: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(w: &[f64], rows: usize, cols: usize, row: usize, used: &mut [bool]) -> f64 {
        if row == rows {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.max(w[row * cols + c] + go(w, rows, cols, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    if rows > cols {
        let t: Vec<f64> = (0..cols * rows).map(|k| w[(k % rows) * cols + k / rows]).collect();
        return go(&t, cols, rows, 0, &mut vec![false; rows]);
    }
    go(w, rows, cols, 0, &mut vec![false; cols])
}

fn metric_oracles() -> Outcome {
    let mut r = rng::keyed(6, 0, 0);
    for k in 0..200 {
        let ka = r.random_range(1..=6);
        let kb = r.random_range(1..=6);
        let (a, b) = (random_map(&mut r, 8, 8, ka), random_map(&mut r, 8, 8, kb));
        let got = ari(&a, &b).map_err(err)?;
        let want = ari_by_pairs(a.as_slice(), b.as_slice());
        ensure(got == want, || format!("map pair {k}: ARI {got} vs pair counting {want}"))?;
    }
    for k in 0..100 {
        let (rows, cols) = (r.random_range(1..=7), r.random_range(1..=7));
        let w: Vec<f64> = (0..rows * cols).map(|_| r.random_range(0..100) as f64).collect();
        let assign = solve_assignment(&w, rows, cols).map_err(err)?;
        let mut used = vec![false; cols];
        let mut total = 0.0;
        for (row, c) in assign.iter().enumerate() {
            if let Some(c) = *c {
                ensure(!used[c], || format!("matrix {k}: column {c} used twice"))?;
                used[c] = true;
                total += w[row * cols + c];
            }
        }
        let matched = assign.iter().filter(|c| c.is_some()).count();
        ensure(matched == rows.min(cols), || format!("matrix {k}: {matched} matches for {rows}x{cols}"))?;
        let best = best_by_enumeration(&w, rows, cols);
        ensure(total == best, || format!("matrix {k} ({rows}x{cols}): solver {total}, enumeration {best}"))?;
    }
    let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1]).map_err(err)?;
    let pred = LabelMap::new(2, 2, vec![0, 1, 0, 1]).map_err(err)?;
    let worked = ari(&gt, &pred).map_err(err)?;
    ensure(worked == -0.5, || format!("worked example gives {worked}"))?;
    Ok("200 ARI maps and 100 assignments exact; worked example -0.5".into())
}

fn toy_config() -> NetConfig {
    NetConfig { base_width: 8, depth_per_level: 1, levels: 2, attention_at_lowest: true, time_embed_dim: 8 }
}

fn perturbed_net<T: diffseg_core::tensor::Real>(kind: PredictionType, channels: usize, seed: u64) -> UNet<T> {
    let mut net = UNet::<T>::new(toy_config(), channels, kind, (-1.0, 1.0), &mut rng::keyed(seed, 0, 0)).unwrap();
    let mut noise = vec![T::zero(); net.parameter_count()];
    rng::fill_normal(&mut rng::keyed(seed, 1, 0), &mut noise);
    for (p, e) in net.params_mut().iter_mut().zip(noise) {
        *p += T::of(0.05) * e;
    }
    net
}

fn gradient_check() -> Outcome {
    let sched = NoiseSchedule::scaled(0.1).map_err(err)?;
    let weighting = LossWeighting::default();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (k, kind) in [PredictionType::X, PredictionType::Eps, PredictionType::V].into_iter().enumerate() {
        let mut net = perturbed_net::<f64>(kind, 4, 10 + k as u64);
        let mut r = rng::keyed(11, k as u64, 0);
        let mut x0 = Tensor::zeros([2, 4, 4, 4]);
        x0.data_mut().iter_mut().for_each(|v| *v = if r.random_bool(0.5) { 1.0 } else { -1.0 });
        let mut eps = Tensor::zeros([2, 4, 4, 4]);
        let mut image = Tensor::zeros([2, 3, 4, 4]);
        rng::fill_normal(&mut r, eps.data_mut());
        rng::fill_normal(&mut r, image.data_mut());
        let t = [0.35, 0.8];
        let x_t = noisy_batch(&x0, &eps, &t, &sched).map_err(err)?;
        let loss = |net: &UNet<f64>| -> Result<f64, String> {
            let pred = net.predict(&x_t, &image, &t).map_err(err)?;
            Ok(loss_and_grad(&pred, &x0, &x_t, &eps, &t, kind, &sched, &weighting).map_err(err)?.0)
        };
        let (pred, trace) = net.forward_train(&x_t, &image, &t).map_err(err)?;
        let (_, dy) = loss_and_grad(&pred, &x0, &x_t, &eps, &t, kind, &sched, &weighting).map_err(err)?;
        net.zero_grad();
        net.backward(&trace, &dy);
        let count = net.parameter_count();
        for j in (0..count).step_by(count / 30) {
            let analytic = net.grads()[j];
            let orig = net.params()[j];
            net.params_mut()[j] = orig + FD_STEP;
            let up = loss(&net)?;
            net.params_mut()[j] = orig - FD_STEP;
            let down = loss(&net)?;
            net.params_mut()[j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(GRAD_FLOOR);
            ensure(rel <= GRAD_REL_TOL, || format!("{kind:?} param {j}: fd {fd:e} analytic {analytic:e}"))?;
            worst = worst.max(rel);
            checked += 1;
        }
    }
    ensure(checked >= MIN_GRAD_PARAMS, || format!("only {checked} parameters checked"))?;
    Ok(format!("{checked} parameters on 4x4 inputs, max relative error {worst:e}, tol {GRAD_REL_TOL:e}"))
}

/// Knows the clean target and answers in its own parameterisation.
struct Oracle {
    kind: PredictionType,
    truth: Tensor<f64>,
    sched: NoiseSchedule,
}

impl Denoiser<f64> for Oracle {
    fn prediction_type(&self) -> PredictionType {
        self.kind
    }

    fn predict(&self, x_t: &Tensor<f64>, _image: &Tensor<f64>, t: &[f64]) -> diffseg_core::Result<Tensor<f64>> {
        let n = self.truth.batch();
        let mut out = Tensor::zeros(x_t.shape());
        for i in 0..x_t.batch() {
            let (alpha, sigma) = self.sched.coefficients(t[i])?;
            let x0 = self.truth.item(i % n);
            for ((o, &x), &xt) in out.item_mut(i).iter_mut().zip(x0).zip(x_t.item(i)) {
                let eps = if sigma > 0.0 { (xt - alpha * x) / sigma } else { 0.0 };
                *o = match self.kind {
                    PredictionType::X => x,
                    PredictionType::Eps => eps,
                    PredictionType::V => alpha * eps - sigma * x,
                };
            }
        }
        Ok(out)
    }
}

/// The plain conditional sampler: no unconditional pass, no combination.
fn unguided_reference(net: &UNet<f32>, images: &Tensor<f32>, ids: &[u64], cfg: &SamplerConfig, sched: &NoiseSchedule, enc: &Encoding) -> Tensor<f32> {
    let [n, _, h, w] = images.shape();
    let shape = [n, enc.channels(), h, w];
    let (lo, hi) = enc.value_range();
    let mut rngs: Vec<Rng> = ids.iter().map(|&id| rng::keyed(cfg.seed, id, 0)).collect();
    let mut x = Tensor::zeros(shape);
    for (i, r) in rngs.iter_mut().enumerate() {
        rng::fill_normal(r, x.item_mut(i));
    }
    let times = cfg.times();
    let mut x_hat = Tensor::zeros(shape);
    for step in 0..cfg.steps {
        let (s, t_next) = (times[step], times[step + 1]);
        let pred = net.predict(&x, images, &vec![s; n]).unwrap();
        for i in 0..n {
            let est = prediction_to_x(pred.item(i), x.item(i), s, net.prediction_type(), sched).unwrap();
            for (d, v) in x_hat.item_mut(i).iter_mut().zip(est) {
                *d = v.max(lo as f32).min(hi as f32);
            }
            let next = ancestral_step(x.item(i), x_hat.item(i), s, t_next, sched, Some(&mut rngs[i])).unwrap();
            x.item_mut(i).copy_from_slice(&next);
        }
    }
    x_hat
}

fn sampler_contracts() -> Outcome {
    let enc = Encoding::analog_bits(4).map_err(err)?;
    let sched = NoiseSchedule::scaled(0.1).map_err(err)?;
    let mut r = rng::keyed(8, 0, 0);
    let gts: Vec<LabelMap> = (0..3).map(|_| random_map(&mut r, 8, 8, 16)).collect();
    let truth = Tensor::stack(&gts.iter().map(|m| encode_map::<f64>(m, &enc)).collect::<Result<Vec<_>, _>>().map_err(err)?)
        .map_err(err)?;
    let images = Tensor::<f64>::zeros([3, 3, 8, 8]);
    let ids = [0, 1, 2];
    let mut oracle_runs = 0;
    for kind in [PredictionType::X, PredictionType::V] {
        let oracle = Oracle { kind, truth: truth.clone(), sched };
        for (gw, stochastic) in [(0.0, true), (1.0, true), (1.0, false)] {
            let cfg = SamplerConfig { steps: 1, guidance_weight: gw, stochastic, seed: 5 };
            let out = sample(&oracle, &images, &ids, &cfg, &sched, &enc).map_err(err)?;
            ensure(out.labels == gts, || format!("{kind:?} oracle, gw {gw}: labels differ from ground truth"))?;
            oracle_runs += 1;
        }
    }

    let net = perturbed_net::<f32>(PredictionType::X, enc.channels(), 20);
    let mut images = Tensor::<f32>::zeros([2, 3, 8, 8]);
    rng::fill_normal(&mut r, images.data_mut());
    let ids = [4, 9];
    let cfg = SamplerConfig { steps: 8, guidance_weight: 0.0, stochastic: true, seed: 3 };
    let got = sample(&net, &images, &ids, &cfg, &sched, &enc).map_err(err)?;
    let want = unguided_reference(&net, &images, &ids, &cfg, &sched, &enc);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&got.x0) == bits(&want), || "gw=0 differs from the unguided reference".into())?;

    let guided = SamplerConfig { guidance_weight: 1.5, ..cfg };
    let a = sample(&net, &images, &ids, &guided, &sched, &enc).map_err(err)?;
    let b = sample(&net, &images, &ids, &guided, &sched, &enc).map_err(err)?;
    ensure(bits(&a.x0) == bits(&b.x0) && a.labels == b.labels, || "fixed-seed reruns differ".into())?;
    let c = sample(&net, &images, &ids, &SamplerConfig { seed: 4, ..guided }, &sched, &enc).map_err(err)?;
    ensure(bits(&a.x0) != bits(&c.x0), || "changing the seed changed nothing".into())?;
    Ok(format!("{oracle_runs} one-step oracle runs exact; gw=0 bitwise equal to reference; reruns bitwise equal"))
}

fn experiment_dir() -> Option<PathBuf> {
    std::env::var_os(ENV_DIR).map(PathBuf::from)
}

fn reduced_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../results/reduced")
}

fn directional(dir: &Path) -> Outcome {
    let checks = report::directional(dir).map_err(err)?;
    let detail = checks.iter().map(|c| format!("{} {}: {}", if c.pass { "ok" } else { "fail" }, c.name, c.detail)).collect::<Vec<_>>();
    let line = detail.join("; ");
    if checks.iter().all(|c| c.pass) {
        Ok(line)
    } else {
        Err(line)
    }
}

fn best_of(dir: &Path) -> Outcome {
    let c = report::best_of_n(dir).map_err(err)?;
    if c.pass {
        Ok(c.detail)
    } else {
        Err(c.detail)
    }
}

struct Tally {
    failed: usize,
}

impl Tally {
    fn run(&mut self, id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let res = f();
        let took = start.elapsed();
        let (status, detail) = match res {
            Ok(d) if took <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over time budget")),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            self.failed += 1;
        }
        println!("criterion {id:>2} {status} {name}: {detail} [{:.2} s of {} s]", took.as_secs_f64(), budget.as_secs());
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let secs = Duration::from_secs;
    let mut tally = Tally { failed: 0 };
    tally.run(1, "gray-code adjacency", secs(1), gray_adjacency);
    tally.run(2, "bit-probability examples", secs(1), class_probability_examples);
    tally.run(3, "input-scaling SNR identity", secs(1), snr_identity);
    tally.run(4, "parameterisation algebra", secs(5), parameterisations);
    tally.run(5, "codec round trips", secs(1), codec_round_trips);
    tally.run(6, "metric oracles", secs(30), metric_oracles);
    tally.run(7, "gradient check", secs(30), gradient_check);
    tally.run(8, "sampler contracts", secs(10), sampler_contracts);

    match experiment_dir() {
        Some(dir) => {
            tally.run(9, "desk-scale directional experiment", secs(60), || directional(&dir));
            tally.run(10, "best-of-N monotonicity", secs(60), || best_of(&dir));
        }
        None => {
            let why = format!("needs trained desk-scale sweeps; set {ENV_DIR} to a directory from scripts/desk_experiment.sh");
            println!("criterion  9 NOT RUN desk-scale directional experiment: {why}");
            println!("criterion 10 NOT RUN best-of-N monotonicity: {why}");
            let reduced = reduced_dir();
            if reduced.join("lap_mode.csv").exists() {
                for line in [directional(&reduced), best_of(&reduced)] {
                    let (tag, d) = match line {
                        Ok(d) => ("pass", d),
                        Err(d) => ("fail", d),
                    };
                    println!("  reduced-scale run in results/reduced ({tag}, informational): {d}");
                }
            }
        }
    }
    if tally.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", tally.failed);
        ExitCode::FAILURE
    }
}
