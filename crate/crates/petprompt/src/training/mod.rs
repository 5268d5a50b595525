//! Training under the mean-reduced L1 objective, checkpoint management and
//! inference-time denoising.
//!
//! All randomness (initialization, epoch shuffling, patch offsets) derives
//! from the single master seed, so a (config, seed) pair reproduces the loss
//! trajectory bit for bit.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, ModelCheckpoint};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, DatasetManifest, DenoiseProvenance, Split, Volume3D, VolumeRole};
use crate::error::{Error, Result};
use crate::model::{forward_graph, CountInput, Model, ModelConfig, ModelParams};
use crate::tensor::{Elem, Tape};

/// Optimization configuration (first-order adaptive-moment method).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Random aligned crops of this size; `None` trains on full volumes.
    pub patch_dims: Option<(usize, usize, usize)>,
    pub master_seed: u64,
    /// Validate every this many epochs.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 4,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
            patch_dims: None,
            master_seed: 0,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.val_every == 0 {
            return Err(Error::InvalidArgument("val_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean absolute voxel difference between prediction and target (the
/// training objective, mean-reduced so the learning rate is independent of
/// volume size).
pub fn l1_loss(pred: &Volume3D, target: &Volume3D) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "loss dims differ: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let n = pred.voxels.len() as f64;
    Ok(pred
        .voxels
        .iter()
        .zip(target.voxels.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / n)
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

/// Paths and records produced by a training run.
#[derive(Debug)]
pub struct TrainOutcome<E: Elem> {
    pub best: ModelCheckpoint<E>,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<EpochRecord>,
}

struct Adam<E: Elem> {
    m: Vec<ArrayD<E>>,
    v: Vec<ArrayD<E>>,
    step: usize,
}

impl<E: Elem> Adam<E> {
    fn new(params: &ModelParams<ArrayD<E>>) -> Self {
        let mut m = Vec::new();
        params.for_each(&mut |_, a| m.push(ArrayD::zeros(a.raw_dim())));
        let v = m.clone();
        Adam { m, v, step: 0 }
    }

    fn update(&mut self, params: &mut ModelParams<ArrayD<E>>, grads: &[ArrayD<E>], cfg: &TrainConfig) {
        self.step += 1;
        let lr = E::f(cfg.learning_rate);
        let b1 = E::f(cfg.beta1);
        let b2 = E::f(cfg.beta2);
        let eps = E::f(cfg.eps);
        let wd = E::f(cfg.weight_decay);
        let bc1 = E::f(1.0 - cfg.beta1.powi(self.step as i32));
        let bc2 = E::f(1.0 - cfg.beta2.powi(self.step as i32));
        let one = E::one();
        let mut idx = 0usize;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.for_each_mut(&mut |_, p| {
            let g = &grads[idx];
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * *gv;
                *vv = b2 * *vv + (one - b2) * *gv * *gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
            }
            idx += 1;
        });
    }
}

/// One training item: low-count input, full-count target, count level.
struct Triple {
    low: Array3<f32>,
    full: Array3<f32>,
    delta: f64,
}

fn load_triples(manifest: &DatasetManifest, split: Split) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for study in manifest.studies_in(split) {
        let full = manifest.load_volume(&study.full_count_path)?;
        for r in &study.realizations {
            let low = manifest.load_volume(&r.path)?;
            triples.push(Triple {
                low: low.voxels,
                full: full.voxels.clone(),
                delta: r.delta,
            });
        }
    }
    Ok(triples)
}

fn to_input<E: Elem>(v: &Array3<f32>) -> ArrayD<E> {
    let (h, w, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let mut out = ArrayD::<E>::zeros(IxDyn(&[1, h, w, d]));
    for (o, &x) in out.iter_mut().zip(v.iter()) {
        *o = E::f(x as f64);
    }
    out
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

fn crop(a: &Array3<f32>, off: (usize, usize, usize), dims: (usize, usize, usize)) -> Array3<f32> {
    a.slice(ndarray::s![
        off.0..off.0 + dims.0,
        off.1..off.1 + dims.1,
        off.2..off.2 + dims.2
    ])
    .to_owned()
}

fn first_nonfinite_group<E: Elem>(params: &ModelParams<ArrayD<E>>) -> Option<String> {
    let mut found = None;
    params.for_each(&mut |name, a| {
        if found.is_none() && a.iter().any(|v| !v.is_finite()) {
            found = Some(name);
        }
    });
    found
}

/// Validation MAE of the current parameters over a sample set.
fn validation_mae<E: Elem>(model: &Model<E>, samples: &[Triple]) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        let pred = model.forward_array(
            &s.low,
            if model.config.mode.needs_delta() {
                CountInput::Value(crate::data::CountLevel::new(s.delta)?)
            } else {
                CountInput::Absent
            },
        )?;
        acc += crate::metrics::mae(&pred, &s.full)?;
    }
    Ok(acc / samples.len() as f64)
}

/// Optimize all parameters on the manifest's train split, selecting the best
/// epoch by validation MAE. Writes `best.pckp`, `last.pckp` and a
/// line-delimited JSON epoch log under `out_dir`.
pub fn train<E: Elem>(
    manifest: &DatasetManifest,
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
    out_dir: &Path,
) -> Result<TrainOutcome<E>> {
    tcfg.validate()?;
    mcfg.validate()?;
    let train_set = load_triples(manifest, Split::Train)?;
    let val_set = load_triples(manifest, Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument(
            "training requires non-empty train and val splits".into(),
        ));
    }
    let div = 1usize << mcfg.levels;
    let sample_dims = {
        let s = train_set[0].low.shape();
        (s[0], s[1], s[2])
    };
    let work_dims = match tcfg.patch_dims {
        Some(pd) => {
            if pd.0 > sample_dims.0 || pd.1 > sample_dims.1 || pd.2 > sample_dims.2 {
                return Err(Error::InvalidArgument(format!(
                    "patch dims {pd:?} exceed volume dims {sample_dims:?}"
                )));
            }
            pd
        }
        None => sample_dims,
    };
    if work_dims.0 % div != 0 || work_dims.1 % div != 0 || work_dims.2 % div != 0 {
        return Err(Error::Shape(format!(
            "training dims {work_dims:?} must divide by 2^{} = {div}",
            mcfg.levels
        )));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut model: Model<E> = Model::init(mcfg.clone(), derive_seed(tcfg.master_seed, &[10]))?;
    let mut adam = Adam::new(&model.params);

    let best_path = out_dir.join("best.pckp");
    let last_path = out_dir.join("last.pckp");
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut records = Vec::with_capacity(tcfg.epochs);

    let header = |epoch: usize, val_mae: f64| CheckpointHeader {
        format_version: 1,
        mode: mcfg.mode,
        model: mcfg.clone(),
        train: tcfg.clone(),
        epoch,
        val_mae,
        dtype: E::DTYPE_NAME.to_string(),
    };

    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..tcfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.master_seed, &[11, epoch as u64]));
        shuffle(&mut indices, &mut rng);

        let mut loss_sum = 0.0;
        for (batch_no, batch) in indices.chunks(tcfg.batch_size).enumerate() {
            let mut grad_acc: Option<Vec<ArrayD<E>>> = None;
            let inv_batch = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for (slot, &si) in batch.iter().enumerate() {
                let sample = &train_set[si];
                let (low, full) = match tcfg.patch_dims {
                    Some(pd) => {
                        let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(
                            tcfg.master_seed,
                            &[12, epoch as u64, batch_no as u64, slot as u64],
                        ));
                        let off = (
                            crng.random_range(0..=sample_dims.0 - pd.0),
                            crng.random_range(0..=sample_dims.1 - pd.1),
                            crng.random_range(0..=sample_dims.2 - pd.2),
                        );
                        (crop(&sample.low, off, pd), crop(&sample.full, off, pd))
                    }
                    None => (sample.low.clone(), sample.full.clone()),
                };

                let mut t: Tape<E> = Tape::new();
                let ids = model.params.map(&mut |a| t.leaf(a.clone()));
                let input = t.constant(to_input::<E>(&low));
                let delta = mcfg.mode.needs_delta().then_some(sample.delta);
                let out = forward_graph(&mut t, input, &ids, mcfg, delta);
                let target = to_input::<E>(&full);
                let loss = t.l1_vs_const(out, target);
                batch_loss += t.scalar(loss).to_f64() * inv_batch;

                let mut grads = t.backward(loss);
                let mut leaf_ids = Vec::new();
                ids.for_each(&mut |_, id| leaf_ids.push(*id));
                let scale = E::f(inv_batch);
                let sample_grads: Vec<ArrayD<E>> = leaf_ids
                    .iter()
                    .map(|&id| {
                        grads
                            .take(id)
                            .map(|g| g.mapv(|v| v * scale))
                            .unwrap_or_else(|| ArrayD::zeros(t.value(id).raw_dim()))
                    })
                    .collect();
                match &mut grad_acc {
                    None => grad_acc = Some(sample_grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(sample_grads.iter()) {
                            *a += g;
                        }
                    }
                }
            }

            if !batch_loss.is_finite() {
                let group = first_nonfinite_group(&model.params)
                    .unwrap_or_else(|| "loss (parameters still finite)".into());
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, first affected group: {group}"
                )));
            }
            loss_sum += batch_loss * batch.len() as f64;
            adam.update(&mut model.params, &grad_acc.unwrap(), tcfg);
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let val_mae = if epoch % tcfg.val_every == 0 || epoch + 1 == tcfg.epochs {
            validation_mae(&model, &val_set)?
        } else {
            records
                .last()
                .map(|r: &EpochRecord| r.val_mae)
                .unwrap_or(f64::INFINITY)
        };
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_mae,
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Format(format!("log encode: {e}")))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        records.push(rec);

        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            save_checkpoint(&model, &header(epoch, val_mae), &best_path)?;
        }
    }

    save_checkpoint(
        &model,
        &header(tcfg.epochs - 1, records.last().map(|r| r.val_mae).unwrap_or(f64::NAN)),
        &last_path,
    )?;
    let _ = best_epoch;
    let best = load_checkpoint::<E>(&best_path)?;
    Ok(TrainOutcome {
        best,
        best_path,
        last_path,
        log_path,
        records,
    })
}

impl<E: Elem> Model<E> {
    /// Inference on a raw voxel grid (dims must divide by 2^levels).
    pub fn forward_array(&self, voxels: &Array3<f32>, delta: CountInput) -> Result<Array3<f32>> {
        let delta_val = self.resolve_delta(delta)?;
        let (h, w, d) = (voxels.shape()[0], voxels.shape()[1], voxels.shape()[2]);
        let div = 1usize << self.config.levels;
        if h % div != 0 || w % div != 0 || d % div != 0 {
            return Err(Error::Shape(format!(
                "input dims ({h}, {w}, {d}) must be divisible by 2^{} = {div}",
                self.config.levels
            )));
        }
        let mut t: Tape<E> = Tape::new();
        let ids = self.params.map(&mut |a| t.constant(a.clone()));
        let input = t.constant(to_input::<E>(voxels));
        let out = forward_graph(&mut t, input, &ids, &self.config, delta_val);
        let ov = t.value(out);
        let mut result = Array3::<f32>::zeros((h, w, d));
        for (o, &v) in result.iter_mut().zip(ov.iter()) {
            *o = v.to_f64() as f32;
        }
        Ok(result)
    }
}

/// Denoise a volume with a loaded checkpoint. Inputs whose dims do not
/// divide by `2^levels` are zero-padded up and the output is cropped back.
pub fn denoise<E: Elem>(
    ckpt: &ModelCheckpoint<E>,
    x: &Volume3D,
    delta: CountInput,
) -> Result<Volume3D> {
    let model = &ckpt.model;
    let div = 1usize << model.config.levels;
    let (h, w, d) = x.dims();
    let pad = |n: usize| n.div_ceil(div) * div;
    let (ph, pw, pd) = (pad(h), pad(w), pad(d));

    let out = if (ph, pw, pd) == (h, w, d) {
        model.forward_array(&x.voxels, delta)?
    } else {
        let mut padded = Array3::<f32>::zeros((ph, pw, pd));
        padded
            .slice_mut(ndarray::s![0..h, 0..w, 0..d])
            .assign(&x.voxels);
        let full = model.forward_array(&padded, delta)?;
        full.slice(ndarray::s![0..h, 0..w, 0..d]).to_owned()
    };
    let out = if model.config.clamp_nonneg_inference {
        out.mapv(|v| v.max(0.0))
    } else {
        out
    };

    let delta_used = model.resolve_delta(delta)?;
    let mut vol = Volume3D::new(
        out,
        x.study_id.clone(),
        x.realization,
        VolumeRole::Denoised,
        None,
    )?;
    vol.provenance = Some(DenoiseProvenance {
        checkpoint_sha256: ckpt.sha256.clone(),
        mode: model.config.mode.as_str().to_string(),
        delta: delta_used,
    });
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, generate_phantom, CountLevel, DatasetConfig, PhantomConfig};
    use crate::injection::InjectionConfig;
    use crate::model::Mode;
    use crate::prompts::{ClpConfig, GpdConfig};

    fn tiny_mcfg(mode: Mode) -> ModelConfig {
        ModelConfig {
            levels: 1,
            base_channels: 2,
            mode,
            groups: 2,
            clp: ClpConfig { hidden: 4, m: 4 },
            gpd: GpdConfig {
                n: 2,
                base_dims: (4, 4, 4),
            },
            injection: InjectionConfig {
                heads: 2,
                expansion: 2,
            },
            film_hidden: 4,
            clamp_nonneg_inference: false,
        }
    }

    fn tiny_dataset(dir: &Path) -> DatasetManifest {
        build_dataset(
            &DatasetConfig {
                train_studies: 1,
                val_studies: 1,
                test_studies: 1,
                realizations: 2,
                dims: (8, 8, 8),
                c_full: 50.0,
                master_seed: 3,
                ..Default::default()
            },
            dir,
        )
        .unwrap()
    }

    fn tiny_tcfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            learning_rate: 1e-3,
            master_seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn l1_loss_examples_and_loop_oracle() {
        let a = generate_phantom(1, (8, 8, 8), &PhantomConfig::default()).unwrap();
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);

        let mut b = a.clone();
        b.voxels.mapv_inplace(|v| v + 0.5);
        assert!((l1_loss(&b, &a).unwrap() - 0.5).abs() < 1e-6);

        let c = generate_phantom(2, (8, 8, 8), &PhantomConfig::default()).unwrap();
        let mut acc = 0.0;
        let mut n = 0usize;
        for (x, y) in a.voxels.iter().zip(c.voxels.iter()) {
            acc += (*x as f64 - *y as f64).abs();
            n += 1;
        }
        assert!((l1_loss(&a, &c).unwrap() - acc / n as f64).abs() < 1e-12);
    }

    #[test]
    fn one_epoch_smoke_checkpoint_loads_and_runs() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(&dir.path().join("data"));
        let out = dir.path().join("run");
        let outcome: TrainOutcome<f32> =
            train(&m, &tiny_tcfg(1), &tiny_mcfg(Mode::Dual), &out).unwrap();
        assert!(outcome.best_path.exists());
        assert!(outcome.last_path.exists());
        assert!(outcome.log_path.exists());
        let ck = load_checkpoint::<f32>(&outcome.best_path).unwrap();
        let x = m
            .load_volume(&m.studies_in(Split::Test).next().unwrap().realizations[0].path)
            .unwrap();
        let delta = x.delta.unwrap();
        let y = denoise(&ck, &x, CountInput::Value(delta)).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert_eq!(y.role, VolumeRole::Denoised);
        let prov = y.provenance.unwrap();
        assert_eq!(prov.mode, "dual");
        assert_eq!(prov.checkpoint_sha256, ck.sha256);
        assert_eq!(prov.delta, Some(delta.value()));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_at_init() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(&dir.path().join("data"));
        let mut tcfg = tiny_tcfg(2);
        tcfg.learning_rate = 0.0;
        let mcfg = tiny_mcfg(Mode::None);
        let outcome: TrainOutcome<f32> = train(&m, &tcfg, &mcfg, &dir.path().join("run")).unwrap();
        let init: Model<f32> =
            Model::init(mcfg.clone(), derive_seed(tcfg.master_seed, &[10])).unwrap();
        let trained = load_checkpoint::<f32>(&outcome.last_path).unwrap();
        let mut a = Vec::new();
        init.params.for_each(&mut |n, arr| a.push((n, arr.clone())));
        let mut b = Vec::new();
        trained.model.params.for_each(&mut |n, arr| b.push((n, arr.clone())));
        for ((n1, a1), (_, b1)) in a.iter().zip(b.iter()) {
            assert_eq!(a1, b1, "group {n1} moved with lr = 0");
        }
    }

    #[test]
    fn reruns_produce_identical_logs() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(&dir.path().join("data"));
        let o1: TrainOutcome<f32> =
            train(&m, &tiny_tcfg(3), &tiny_mcfg(Mode::Gpd), &dir.path().join("r1")).unwrap();
        let o2: TrainOutcome<f32> =
            train(&m, &tiny_tcfg(3), &tiny_mcfg(Mode::Gpd), &dir.path().join("r2")).unwrap();
        assert_eq!(o1.records, o2.records);
        let l1 = fs::read(&o1.log_path).unwrap();
        let l2 = fs::read(&o2.log_path).unwrap();
        assert_eq!(l1, l2, "epoch logs should be byte-identical");
    }

    #[test]
    fn training_reduces_loss_on_tiny_problem() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(&dir.path().join("data"));
        let mut tcfg = tiny_tcfg(20);
        tcfg.learning_rate = 3e-3;
        let outcome: TrainOutcome<f32> =
            train(&m, &tcfg, &tiny_mcfg(Mode::None), &dir.path().join("run")).unwrap();
        let first = outcome.records.first().unwrap().train_loss;
        let last = outcome.records.last().unwrap().train_loss;
        assert!(
            last < first,
            "expected loss to decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(&dir.path().join("data"));
        let outcome: TrainOutcome<f32> =
            train(&m, &tiny_tcfg(1), &tiny_mcfg(Mode::Clp), &dir.path().join("run")).unwrap();
        let x = m
            .load_volume(&m.studies_in(Split::Test).next().unwrap().realizations[0].path)
            .unwrap();
        let delta = CountInput::Value(x.delta.unwrap());
        let y1 = denoise(&outcome.best, &x, delta).unwrap();
        // reload and run again
        let again = load_checkpoint::<f32>(&outcome.best_path).unwrap();
        let y2 = denoise(&again, &x, delta).unwrap();
        assert_eq!(y1.voxels, y2.voxels);
    }

    #[test]
    fn denoise_pads_and_crops_odd_dims() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(&dir.path().join("data"));
        let mut mcfg = tiny_mcfg(Mode::None);
        mcfg.levels = 1;
        let outcome: TrainOutcome<f32> =
            train(&m, &tiny_tcfg(1), &mcfg, &dir.path().join("run")).unwrap();
        // odd-sized input: 7x7x5 must round-trip through padding
        let truth = generate_phantom(8, (9, 9, 9), &PhantomConfig::default()).unwrap();
        let mut odd = truth.clone();
        odd.voxels = odd.voxels.slice(ndarray::s![0..7, 0..7, 0..5]).to_owned();
        let y = denoise(&outcome.best, &odd, CountInput::Absent).unwrap();
        assert_eq!(y.dims(), (7, 7, 5));
    }

    #[test]
    fn unconditioned_mode_ignores_delta_value() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(&dir.path().join("data"));
        let outcome: TrainOutcome<f32> =
            train(&m, &tiny_tcfg(1), &tiny_mcfg(Mode::None), &dir.path().join("run")).unwrap();
        let x = m
            .load_volume(&m.studies_in(Split::Test).next().unwrap().realizations[0].path)
            .unwrap();
        let y1 = denoise(
            &outcome.best,
            &x,
            CountInput::Value(CountLevel::new(0.13).unwrap()),
        )
        .unwrap();
        let y2 = denoise(
            &outcome.best,
            &x,
            CountInput::Value(CountLevel::new(0.22).unwrap()),
        )
        .unwrap();
        assert_eq!(y1.voxels, y2.voxels);
        // and poison proves it structurally
        let y3 = denoise(&outcome.best, &x, CountInput::Poison).unwrap();
        assert_eq!(y1.voxels, y3.voxels);
    }
}
