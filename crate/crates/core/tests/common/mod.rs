//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use dgmnet::arch::{build_model, Block, ModelSpec, Variant};
use dgmnet::generator::GeneratorSpec;
use dgmnet::layers::SqueezeExcite;
use dgmnet::volume::{Kind, Volume};
use dgmnet_nn::{Graph, Mode, ParamStore};
use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One random loss instance.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub pred: Array4<f64>,
    pub target: Array4<f64>,
    /// (N, S·9) flat landmark vectors.
    pub lm_pred: Array2<f64>,
    pub lm_truth: Array2<f64>,
    pub lambda: f64,
    pub eps: f64,
}

/// Probabilities stay in [0.05, 0.95] and coordinate differences avoid the
/// smooth-L1 kink at |Δ| = 1, so finite differences are well defined.
pub fn loss_instance(seed: u64, n: usize, s: usize, h: usize, w: usize) -> LossInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = Array4::from_shape_fn((n, 1, h, w), |_| rng.random_range(0.05..0.95));
    let target = Array4::from_shape_fn((n, 1, h, w), |_| rng.random_bool(0.4) as u8 as f64);
    let mut lm_truth = Array2::zeros((n, s * 9));
    let mut lm_pred = Array2::zeros((n, s * 9));
    for i in 0..n {
        for u in 0..s {
            let present = rng.random_bool(0.6);
            lm_truth[[i, u * 9]] = present as u8 as f64;
            lm_pred[[i, u * 9]] = rng.random_range(0.05..0.95);
            for k in 1..9 {
                if present {
                    lm_truth[[i, u * 9 + k]] = rng.random_range(0.0..1.0);
                }
                let mut d: f64 = rng.random_range(-2.5..2.5);
                while (d.abs() - 1.0).abs() < 0.05 {
                    d = rng.random_range(-2.5..2.5);
                }
                lm_pred[[i, u * 9 + k]] = lm_truth[[i, u * 9 + k]] + d;
            }
        }
    }
    LossInstance {
        pred,
        target,
        lm_pred,
        lm_truth,
        lambda: rng.random_range(0.0..3.0),
        eps: 1e-6,
    }
}

fn clip(p: f64) -> f64 {
    p.max(1e-7).min(1.0 - 1e-7)
}

fn bce(p: f64, z: f64) -> f64 {
    let p = clip(p);
    -(z * p.ln() + (1.0 - z) * (1.0 - p).ln())
}

fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d * d / 2.0
    } else {
        d.abs() - 0.5
    }
}

/// Soft Dice per sample, averaged over the batch, from plain loops.
pub fn oracle_dice(pred: &Array4<f64>, target: &Array4<f64>, eps: f64) -> f64 {
    let (n, _, h, w) = pred.dim();
    let mut total = 0.0;
    for i in 0..n {
        let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                inter += pred[[i, 0, y, x]] * target[[i, 0, y, x]];
                sp += pred[[i, 0, y, x]];
                st += target[[i, 0, y, x]];
            }
        }
        total += 1.0 - (2.0 * inter + eps) / (sp + st + eps);
    }
    total / n as f64
}

pub fn oracle_ce(pred: &Array4<f64>, target: &Array4<f64>) -> f64 {
    let v: Vec<f64> = pred.iter().zip(target.iter()).map(|(&p, &t)| bce(p, t)).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn oracle_cls(lm_pred: &Array2<f64>, lm_truth: &Array2<f64>) -> f64 {
    let (n, len) = lm_pred.dim();
    let s = len / 9;
    let mut total = 0.0;
    for i in 0..n {
        for u in 0..s {
            total += bce(lm_pred[[i, u * 9]], lm_truth[[i, u * 9]]);
        }
    }
    total / (n * s) as f64
}

pub fn oracle_lnd(lm_pred: &Array2<f64>, lm_truth: &Array2<f64>) -> f64 {
    let (n, len) = lm_pred.dim();
    let s = len / 9;
    let mut total = 0.0;
    for i in 0..n {
        for u in 0..s {
            if lm_truth[[i, u * 9]] == 1.0 {
                for k in 1..9 {
                    total += huber(lm_truth[[i, u * 9 + k]] - lm_pred[[i, u * 9 + k]]);
                }
            }
        }
    }
    total / n as f64
}

/// dice + ce + λ·(cls + lnd).
pub fn oracle_total(inst: &LossInstance) -> f64 {
    oracle_dice(&inst.pred, &inst.target, inst.eps)
        + oracle_ce(&inst.pred, &inst.target)
        + inst.lambda * (oracle_cls(&inst.lm_pred, &inst.lm_truth) + oracle_lnd(&inst.lm_pred, &inst.lm_truth))
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|k| {
            work[k] = x[k] + h;
            let lp = f(&work);
            work[k] = x[k] - h;
            let lm = f(&work);
            work[k] = x[k];
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, 1e-12).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Random binary mask volume with a few boxes, never empty.
pub fn random_mask(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), spacing: [f32; 3]) -> Volume {
    let (w, h, c) = dims;
    let mut data = Array3::<f32>::zeros((c, h, w));
    let boxes = rng.random_range(1..4);
    for _ in 0..boxes {
        let z0 = rng.random_range(0..c);
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        let z1 = rng.random_range(z0 + 1..=c);
        let y1 = rng.random_range(y0 + 1..=h);
        let x1 = rng.random_range(x0 + 1..=w);
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    if rng.random_bool(0.9) {
                        data[[z, y, x]] = 1.0;
                    }
                }
            }
        }
    }
    if data.iter().all(|&v| v == 0.0) {
        data[[c / 2, h / 2, w / 2]] = 1.0;
    }
    Volume::new(data, spacing, Kind::Mask).unwrap()
}

/// Direct voxel counting: (tp, fp, fn).
pub fn count_overlap(pred: &Volume, truth: &Volume) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let (w, h, c) = pred.dims();
    for z in 0..c {
        for y in 0..h {
            for x in 0..w {
                let p = pred.data()[[z, y, x]] > 0.5;
                let t = truth.data()[[z, y, x]] > 0.5;
                match (p, t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
    }
    (tp, fp, fn_)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Surface voxels (6-neighbourhood, outside counts as background) and
/// all-pairs symmetric mean surface distance, written independently of
/// the library.
pub fn brute_asd(a: &Volume, b: &Volume) -> f64 {
    let surface = |v: &Volume| {
        let d = v.data();
        let (c, h, w) = d.dim();
        let on = |z: i64, y: i64, x: i64| {
            z >= 0 && y >= 0 && x >= 0 && z < c as i64 && y < h as i64 && x < w as i64 && d[[z as usize, y as usize, x as usize]] > 0.5
        };
        let mut pts = Vec::new();
        for z in 0..c as i64 {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if !on(z, y, x) {
                        continue;
                    }
                    let nb = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                    if nb.iter().any(|&(dz, dy, dx)| !on(z + dz, y + dy, x + dx)) {
                        pts.push([x as f64, y as f64, z as f64]);
                    }
                }
            }
        }
        pts
    };
    let sp = a.spacing();
    let (sa, sb) = (surface(a), surface(b));
    let dist = |p: &[f64; 3], q: &[f64; 3]| {
        (0..3).map(|k| ((p[k] - q[k]) * sp[k] as f64).powi(2)).sum::<f64>().sqrt()
    };
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        from.iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    (directed(&sa, &sb) + directed(&sb, &sa)) / 2.0
}

pub fn with_spacing(v: &Volume, spacing: [f32; 3]) -> Volume {
    Volume::new(v.data().clone(), spacing, v.kind()).unwrap()
}

/// Desk-width spec of `variant` on square `size`×`size` slices.
pub fn spec_at(variant: Variant, size: usize) -> ModelSpec {
    let mut spec = ModelSpec::desk(variant, 16);
    spec.input_size = (size, size);
    if let Some(g) = spec.generator.as_mut() {
        *g = GeneratorSpec::for_output(16, g.projection.0, g.upconv_stages, (size, size));
    }
    spec
}

/// Forward of a random batch in both modes; checks the output shape, the
/// probability range and the landmark head's presence. With batch
/// statistics the sigmoid output must lie strictly inside (0, 1). An
/// untrained network in evaluation mode has identity normalization, so
/// residual sums can saturate the f32 sigmoid; there only [0, 1] holds.
pub fn forward_contract(variant: Variant, size: usize, n: usize) -> Result<(), String> {
    let spec = spec_at(variant, size);
    let model = build_model(&spec, 5).map_err(|e| e.to_string())?;
    let mut r = rng(size as u64);
    let x = ArrayD::from_shape_fn(IxDyn(&[n, 1, size, size]), |_| r.random_range(-1.0f32..1.0));
    let idx: Vec<usize> = (0..n).map(|i| i % 16).collect();
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new(&model.store, mode, 0);
        let xv = g.input(x.clone());
        let out = model.forward(&mut g, xv, Some(&idx)).map_err(|e| e.to_string())?;
        let shape = g.shape(out.mask).to_vec();
        if shape != [n, 1, size, size] {
            return Err(format!("{variant} at {size}: output {shape:?}"));
        }
        let in_range = match mode {
            Mode::Train => g.value(out.mask).iter().all(|&p| p > 0.0 && p < 1.0),
            Mode::Eval => g.value(out.mask).iter().all(|&p| (0.0..=1.0).contains(&p)),
        };
        if !in_range {
            return Err(format!("{variant} at {size} ({mode:?}): output outside the probability range"));
        }
        match (variant == Variant::DgmNet, out.landmarks) {
            (true, Some(l)) if g.shape(l) == [n, 16 * 9] => {}
            (false, None) => {}
            _ => return Err(format!("{variant} at {size}: landmark head mismatch")),
        }
    }
    Ok(())
}

/// SE stage with excitation weights 0 and bias 100: the gate saturates at
/// exactly 1 and the stage must return its input unchanged.
pub fn se_identity_exact() -> bool {
    let mut store = ParamStore::new(3);
    let se = SqueezeExcite::new(&mut store, "se", 12, 4);
    store.set_value("se.fc2.weight", ArrayD::zeros(IxDyn(&[12, 3]))).unwrap();
    store.set_value("se.fc2.bias", ArrayD::from_elem(IxDyn(&[12]), 100.0)).unwrap();
    let mut r = rng(9);
    let x = ArrayD::from_shape_fn(IxDyn(&[3, 12, 8, 8]), |_| r.random_range(-2.0f32..2.0));
    let mut g = Graph::new(&store, Mode::Eval, 0);
    let xv = g.input(x.clone());
    let y = se.forward(&mut g, xv).unwrap();
    g.value(y) == &x
}

/// Residual block with all convolution weights and biases zeroed, in
/// evaluation mode: its output must equal its projection path.
pub fn residual_identity_exact(variant: Variant) -> bool {
    let mut store = ParamStore::new(4);
    let block = Block::new(&mut store, "b", 5, 7, variant, 2);
    for name in ["b.conv1.weight", "b.conv1.bias", "b.conv2.weight", "b.conv2.bias"] {
        let shape = store.by_name(name).unwrap().value.shape().to_vec();
        store.set_value(name, ArrayD::zeros(IxDyn(&shape))).unwrap();
    }
    let mut r = rng(10);
    let x = ArrayD::from_shape_fn(IxDyn(&[2, 5, 8, 8]), |_| r.random_range(-2.0f32..2.0));
    let mut g = Graph::new(&store, Mode::Eval, 0);
    let xv = g.input(x);
    let y = block.forward(&mut g, xv).unwrap();
    let s = block.project(&mut g, xv).unwrap().expect("residual variant");
    g.value(y) == g.value(s)
}

/// Run the command-line entry point in-process.
pub fn cli(args: &[&str]) -> i32 {
    dgmnet::cli::run(std::iter::once("dgmnet").chain(args.iter().copied()))
}

/// Writes a small, fast experiment config under `root` and returns its
/// path. `extra` lines are appended and override earlier ones only if the
/// key is new, so callers pass disjoint keys.
pub fn small_config(root: &std::path::Path, name: &str, extra: &str) -> std::path::PathBuf {
    let text = format!(
        "phantom.n_cases = 8\n\
         train.epochs = 2\n\
         train.early_stop_patience = 5\n\
         generator.epochs = 2\n\
         generator.folds = 2\n\
         paths.data_dir = {data}\n\
         paths.runs_dir = {runs}\n\
         {extra}\n",
        data = root.join("data").display(),
        runs = root.join("runs").display(),
    );
    let path = root.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// Every file under `dir` keyed by relative path.
pub fn tree_bytes(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// (case, expected, actual) for each row of the exit-code contract.
/// Leaves a dataset under `root/data` and a trained run under
/// `root/runs/unet_ok`.
pub fn exit_code_table(root: &std::path::Path) -> Vec<(&'static str, i32, i32)> {
    let cfg = small_config(root, "small.cfg", "");
    let cfg = cfg.to_str().unwrap();
    let bad_key = root.join("bad.cfg");
    std::fs::write(&bad_key, "train.no_such_key = 3\n").unwrap();
    let bad_value = root.join("bad_value.cfg");
    std::fs::write(&bad_value, "train.batch_size = 0\n").unwrap();
    let nan = small_config(root, "nan.cfg", "train.learning_rate = 1e30");
    let data = root.join("data");
    let data = data.to_str().unwrap();
    let missing = root.join("missing");
    let missing = missing.to_str().unwrap();
    let ok_run = root.join("runs").join("unet_ok");
    let ok_run = ok_run.to_str().unwrap();
    let nan_run = root.join("runs").join("unet_nan");
    let nan_run = nan_run.to_str().unwrap();
    let eval_out = root.join("runs").join("eval");
    let eval_out = eval_out.to_str().unwrap();
    let mut rows = vec![];
    let mut row = |name, expected, args: &[&str]| rows.push((name, expected, cli(args)));
    row("help", 0, &["--help"]);
    row("generate-data", 0, &["--config", cfg, "generate-data"]);
    row("generate-data again", 4, &["--config", cfg, "generate-data"]);
    row("generate-data --overwrite", 0, &["--config", cfg, "--overwrite", "generate-data"]);
    row("unknown flag", 2, &["--config", cfg, "train", "--bogus"]);
    row("unknown config key", 2, &["--config", bad_key.to_str().unwrap(), "generate-data"]);
    row("invalid config value", 2, &["--config", bad_value.to_str().unwrap(), "generate-data"]);
    row("missing config file", 3, &["--config", missing, "generate-data"]);
    row("missing dataset", 3, &["--config", cfg, "--out", ok_run, "train", "--variant", "unet", "--data", missing]);
    row("dgmnet without generator", 2, &["--config", cfg, "train", "--variant", "dgmnet", "--data", data]);
    row("train unet", 0, &["--config", cfg, "--out", ok_run, "train", "--variant", "unet", "--data", data]);
    row("train unet again", 4, &["--config", cfg, "--out", ok_run, "train", "--variant", "unet", "--data", data]);
    row("evaluate missing checkpoint", 3, &["--config", cfg, "--out", eval_out, "evaluate", "--checkpoint", missing, "--data", data]);
    row("evaluate", 0, &["--config", cfg, "--out", eval_out, "evaluate", "--checkpoint", ok_run, "--data", data]);
    row("non-finite loss", 5, &["--config", nan.to_str().unwrap(), "--out", nan_run, "train", "--variant", "unet", "--data", data]);
    rows
}

/// Gradient census of one training-mode backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub generator_entries: usize,
    /// Generator entries with any non-zero gradient value.
    pub generator_nonzero: usize,
    /// Trainable entries outside the generator with a non-zero gradient.
    pub other_nonzero: usize,
}

pub fn probe_gradients(model: &dgmnet::arch::Model, batch: &dgmnet::trainer::Batch) -> Probe {
    use dgmnet::losses::{total_loss, LandmarkTerms, LossConfig};
    let mut g = Graph::new(&model.store, Mode::Train, 1);
    let x = g.input(batch.images.clone().into_dyn());
    let out = model.forward(&mut g, x, Some(&batch.slice_index)).unwrap();
    let pred = g.value(out.mask).view().into_dimensionality::<ndarray::Ix4>().unwrap().mapv(f64::from);
    let lm = out.landmarks.map(|l| g.value(l).view().into_dimensionality::<ndarray::Ix2>().unwrap().mapv(f64::from));
    let terms = lm.as_ref().map(|p| LandmarkTerms { pred: p.view(), truth: batch.landmarks.view() });
    let (_, grads) = total_loss(pred.view(), batch.masks.view(), terms, &LossConfig::default()).unwrap();
    let mut seeds = vec![(out.mask, grads.mask.mapv(|v| v as f32).into_dyn())];
    if let (Some(l), Some(gl)) = (out.landmarks, grads.landmarks) {
        seeds.push((l, gl.mapv(|v| v as f32).into_dyn()));
    }
    let grads = g.backward(&seeds).unwrap();
    let mut probe = Probe { generator_entries: 0, generator_nonzero: 0, other_nonzero: 0 };
    for (id, p) in model.store.iter() {
        let nonzero = grads.get(id).is_some_and(|a| a.iter().any(|&v| v != 0.0));
        if p.name.starts_with("generator.") {
            probe.generator_entries += 1;
            probe.generator_nonzero += nonzero as usize;
        } else if nonzero {
            probe.other_nonzero += 1;
        }
    }
    probe
}

/// `n` phantom cases of the default configuration: (high, low).
pub fn phantom_cases(n: usize, seed: u64) -> (Vec<dgmnet::volume::CaseRecord>, Vec<dgmnet::volume::CaseRecord>) {
    let cfg = dgmnet::phantoms::PhantomConfig { rng_seed: seed, ..Default::default() };
    (0..n).map(|i| dgmnet::phantoms::generate_phantom(&cfg, i).unwrap()).unzip()
}

pub fn arb_volume() -> impl proptest::strategy::Strategy<Value = Volume> {
    use proptest::prelude::*;
    (1usize..6, 1usize..6, 1usize..5, any::<bool>(), 0.1f32..5.0, 0.1f32..5.0, 0.1f32..5.0).prop_flat_map(
        |(w, h, c, is_mask, sx, sy, sz)| {
            prop::collection::vec(any::<f32>(), w * h * c).prop_map(move |vals| {
                let (kind, vals) = if is_mask {
                    (Kind::Mask, vals.iter().map(|v| if v.is_sign_negative() { 0.0 } else { 1.0 }).collect())
                } else {
                    (Kind::Image, vals)
                };
                Volume::new(Array3::from_shape_vec((c, h, w), vals).unwrap(), [sx, sy, sz], kind).unwrap()
            })
        },
    )
}

/// DGMV properties over `cases` random volumes: bit-exact round trip,
/// exact file size, and rejection of truncated or mislabeled bytes.
pub fn dgmv_property_suite(cases: u32) -> Result<(), String> {
    use dgmnet::volume::{decode_volume, encode_volume, HEADER_LEN};
    use proptest::test_runner::{Config, TestCaseError, TestRunner};
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner
        .run(&(arb_volume(), 0usize..1000), |(v, cut)| {
            let bytes = encode_volume(&v);
            let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(TestCaseError::fail(what.to_string())) };
            check(bytes.len() == HEADER_LEN + 4 * v.data().len(), "file size")?;
            let back = decode_volume(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
            check(back.dims() == v.dims() && back.kind() == v.kind(), "header fields")?;
            check(back.spacing().map(f32::to_bits) == v.spacing().map(f32::to_bits), "spacing bits")?;
            check(back.data().iter().zip(v.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "payload bits")?;
            check(encode_volume(&back) == bytes, "re-encode")?;
            let short = cut % bytes.len();
            check(decode_volume(&bytes[..short]).is_err(), "truncated file accepted")?;
            let mut magic = bytes.clone();
            magic[0] ^= 0xff;
            check(decode_volume(&magic).is_err(), "bad magic accepted")?;
            let mut long = bytes.clone();
            long.push(0);
            check(decode_volume(&long).is_err(), "trailing bytes accepted")?;
            Ok(())
        })
        .map_err(|e| e.to_string())
}
