//! Binary checkpoints for the interleaved regression trainer.
//!
//! A checkpoint captures everything a resumed run needs to continue
//! bit-exactly: the config digest and seed it belongs to, both parameter
//! sets (learner and up-sampler) with names and shapes, both Adam states,
//! both random-stream positions, and the progress counters.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic            8 bytes, "ATUCKPT1"
//! digest           str (u32 length + UTF-8 bytes)
//! seed             u64
//! mode             u8 (0 plain, 1 up-sampled, 2 adversarial)
//! k_support, k_query, meta_batch          u64 each
//! cycles_done, up_iterations_done         u64 each
//! cfg              eta1 eta2 eta3 f64; r_coarse r_detail n_patch
//!                  pool_size max_iterations u64; ratio lr f64
//! ranges           8 f64 (amplitude, frequency, phase, input bounds)
//! model            loss_kind u8, inner_steps u64, inner_rate f64,
//!                  learned_rates u8, layer_dims (u32 count + u64 each),
//!                  params block
//! upsampler arch   11 u64 (shots, patch, ratios, widths)
//! upsampler        params block
//! meta_opt, up_opt lr f64, step u64, m block, v block
//! task_rng, up_rng 32-byte seed, u64 stream, 16-byte word position
//! ```
//!
//! A params block is a u32 count followed by, per tensor: name (u32 +
//! bytes), rows u64, cols u64, then rows*cols f64 values. A moment block
//! is a u32 count of u32-length f64 vectors.
//!
//! Files are written to a temporary sibling and renamed into place, so an
//! interrupted save never corrupts the previous checkpoint.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use atu_core::autodiff::{Optimizer, ParamTensor};
use atu_core::meta::{LossKind, MetaModel};
use atu_core::tasks::DomainRanges;
use atu_core::upsampler::{AtuConfig, AtuTrainer, TrainMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MAGIC: &[u8; 8] = b"ATUCKPT1";

// --- encoding ---------------------------------------------------------------

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn new() -> Self {
        Enc {
            buf: Vec::with_capacity(1 << 20),
        }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn params(&mut self, params: &[ParamTensor]) {
        self.u32(params.len() as u32);
        for p in params {
            self.str(&p.name);
            self.u64(p.rows as u64);
            self.u64(p.cols as u64);
            for v in &p.values {
                self.f64(*v);
            }
        }
    }

    fn moments(&mut self, vecs: &[Vec<f64>]) {
        self.u32(vecs.len() as u32);
        for v in vecs {
            self.u32(v.len() as u32);
            for x in v {
                self.f64(*x);
            }
        }
    }

    fn opt(&mut self, opt: &Optimizer) {
        self.f64(opt.lr);
        self.u64(opt.step_count());
        let (m, v) = opt.moments();
        self.moments(m);
        self.moments(v);
    }

    fn rng(&mut self, rng: &ChaCha8Rng) {
        self.buf.extend_from_slice(&rng.get_seed());
        self.u64(rng.get_stream());
        self.buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    }
}

// --- decoding ---------------------------------------------------------------

struct Dec<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(data: &'a [u8]) -> Self {
        Dec { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.pos + n <= self.data.len(),
            "checkpoint truncated at byte {} (wanted {n} more)",
            self.pos
        );
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        Ok(String::from_utf8(self.take(len)?.to_vec()).context("checkpoint string not UTF-8")?)
    }

    fn params(&mut self) -> Result<Vec<ParamTensor>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name = self.str()?;
            let rows = self.u64()? as usize;
            let cols = self.u64()? as usize;
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                values.push(self.f64()?);
            }
            out.push(ParamTensor::new(name, rows, cols, values));
        }
        Ok(out)
    }

    fn moments(&mut self) -> Result<Vec<Vec<f64>>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let len = self.u32()? as usize;
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                v.push(self.f64()?);
            }
            out.push(v);
        }
        Ok(out)
    }

    fn opt(&mut self) -> Result<Optimizer> {
        let lr = self.f64()?;
        let step = self.u64()?;
        let m = self.moments()?;
        let v = self.moments()?;
        let mut opt = Optimizer::adam(lr);
        opt.restore(step, m, v);
        Ok(opt)
    }

    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.take(32)?.try_into().unwrap();
        let stream = self.u64()?;
        let word_pos = u128::from_le_bytes(self.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

// --- save -------------------------------------------------------------------

fn mode_byte(mode: TrainMode) -> u8 {
    match mode {
        TrainMode::Vanilla => 0,
        TrainMode::Upsampled => 1,
        TrainMode::AdversarialUpsampled => 2,
    }
}

fn mode_from_byte(b: u8) -> Result<TrainMode> {
    Ok(match b {
        0 => TrainMode::Vanilla,
        1 => TrainMode::Upsampled,
        2 => TrainMode::AdversarialUpsampled,
        other => bail!("unknown training mode byte {other}"),
    })
}

/// Serializes the trainer and atomically replaces `path`.
pub fn save_trainer(path: &Path, digest: &str, seed: u64, trainer: &AtuTrainer) -> Result<()> {
    let mut e = Enc::new();
    e.buf.extend_from_slice(MAGIC);
    e.str(digest);
    e.u64(seed);
    e.u8(mode_byte(trainer.mode));
    e.u64(trainer.k_support as u64);
    e.u64(trainer.k_query as u64);
    e.u64(trainer.meta_batch as u64);
    e.u64(trainer.cycles_done as u64);
    e.u64(trainer.up_iterations_done as u64);

    let cfg = &trainer.cfg;
    e.f64(cfg.eta1);
    e.f64(cfg.eta2);
    e.f64(cfg.eta3);
    e.u64(cfg.r_coarse as u64);
    e.u64(cfg.r_detail as u64);
    e.u64(cfg.n_patch as u64);
    e.u64(cfg.pool_size as u64);
    e.u64(cfg.max_iterations as u64);
    e.f64(cfg.augment_ratio);
    e.f64(cfg.upsampler_lr);

    let r = &trainer.ranges;
    for (lo, hi) in [r.amplitude, r.frequency, r.phase, r.input] {
        e.f64(lo);
        e.f64(hi);
    }

    let model = &trainer.model;
    e.u8(match model.loss_kind {
        LossKind::SquaredError => 0,
        LossKind::CrossEntropy => 1,
    });
    e.u64(model.inner_steps as u64);
    e.f64(model.inner_rate);
    e.u8(model.has_learned_rates() as u8);
    e.u32(model.layer_dims.len() as u32);
    for d in &model.layer_dims {
        e.u64(*d as u64);
    }
    e.params(model.trainables());

    let arch = trainer.upsampler.arch();
    for v in [
        arch.k_support,
        arch.k_query,
        arch.n_patch,
        arch.r_coarse,
        arch.r_detail,
        arch.conv_channels.0,
        arch.conv_channels.1,
        arch.set_dim,
        arch.coarse_hidden,
        arch.decoder_channels.0,
        arch.decoder_channels.1,
    ] {
        e.u64(v as u64);
    }
    e.params(trainer.upsampler.params());

    e.opt(&trainer.meta_opt);
    e.opt(&trainer.up_opt);
    e.rng(&trainer.task_rng);
    e.rng(&trainer.up_rng);

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &e.buf).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("replacing {} atomically", path.display()))?;
    Ok(())
}

// --- load -------------------------------------------------------------------

pub struct LoadedTrainer {
    pub digest: String,
    pub seed: u64,
    pub trainer: AtuTrainer,
}

/// Copies stored values into live parameters, insisting on identical names
/// and shapes (a mismatch means the file does not belong to this model).
fn restore_params(live: &mut [ParamTensor], stored: &[ParamTensor]) -> Result<()> {
    ensure!(
        live.len() == stored.len(),
        "checkpoint has {} tensors, model has {}",
        stored.len(),
        live.len()
    );
    for (l, s) in live.iter_mut().zip(stored) {
        ensure!(
            l.name == s.name && l.rows == s.rows && l.cols == s.cols,
            "checkpoint tensor '{}' [{}x{}] does not match model tensor '{}' [{}x{}]",
            s.name,
            s.rows,
            s.cols,
            l.name,
            l.rows,
            l.cols
        );
        l.values.clone_from(&s.values);
    }
    Ok(())
}

pub fn load_trainer(path: &Path) -> Result<LoadedTrainer> {
    let data =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut d = Dec::new(&data);
    ensure!(d.take(8)? == MAGIC, "not a trainer checkpoint (bad magic)");
    let digest = d.str()?;
    let seed = d.u64()?;
    let mode = mode_from_byte(d.u8()?)?;
    let k_support = d.u64()? as usize;
    let k_query = d.u64()? as usize;
    let meta_batch = d.u64()? as usize;
    let cycles_done = d.u64()? as usize;
    let up_iterations_done = d.u64()? as usize;

    let cfg = AtuConfig {
        eta1: d.f64()?,
        eta2: d.f64()?,
        eta3: d.f64()?,
        r_coarse: d.u64()? as usize,
        r_detail: d.u64()? as usize,
        n_patch: d.u64()? as usize,
        pool_size: d.u64()? as usize,
        max_iterations: d.u64()? as usize,
        augment_ratio: d.f64()?,
        upsampler_lr: d.f64()?,
    };
    let mut bounds = [0.0f64; 8];
    for b in &mut bounds {
        *b = d.f64()?;
    }
    let ranges = DomainRanges {
        amplitude: (bounds[0], bounds[1]),
        frequency: (bounds[2], bounds[3]),
        phase: (bounds[4], bounds[5]),
        input: (bounds[6], bounds[7]),
    };

    let loss_kind = match d.u8()? {
        0 => LossKind::SquaredError,
        1 => LossKind::CrossEntropy,
        other => bail!("unknown loss kind byte {other}"),
    };
    let inner_steps = d.u64()? as usize;
    let inner_rate = d.f64()?;
    let learned_rates = d.u8()? != 0;
    let n_dims = d.u32()? as usize;
    let mut layer_dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        layer_dims.push(d.u64()? as usize);
    }
    let model_params = d.params()?;

    let mut arch_fields = [0usize; 11];
    for f in &mut arch_fields {
        *f = d.u64()? as usize;
    }
    let up_params = d.params()?;

    let meta_opt = d.opt()?;
    let up_opt = d.opt()?;
    let task_rng = d.rng()?;
    let up_rng = d.rng()?;
    ensure!(
        d.pos == data.len(),
        "checkpoint has {} trailing bytes",
        data.len() - d.pos
    );

    // Rebuild the trainer: construct with throwaway randomness, then
    // overwrite every piece of state from the file.
    let mut throwaway = ChaCha8Rng::seed_from_u64(0);
    let mut model = MetaModel::new(&layer_dims, loss_kind, inner_steps, inner_rate, &mut throwaway)
        .context("rebuilding learner from checkpoint")?;
    if learned_rates {
        model = model.into_learned_rates();
    }
    restore_params(model.trainables_mut(), &model_params)?;

    let mut trainer = AtuTrainer::new(
        mode,
        model,
        cfg,
        ranges,
        k_support,
        k_query,
        meta_batch,
        meta_opt.lr,
        0,
        &mut throwaway,
    )
    .context("rebuilding trainer from checkpoint")?;
    let arch = trainer.upsampler.arch();
    let expect = [
        arch.k_support,
        arch.k_query,
        arch.n_patch,
        arch.r_coarse,
        arch.r_detail,
        arch.conv_channels.0,
        arch.conv_channels.1,
        arch.set_dim,
        arch.coarse_hidden,
        arch.decoder_channels.0,
        arch.decoder_channels.1,
    ];
    ensure!(
        arch_fields == expect,
        "checkpoint up-sampler shape {arch_fields:?} does not match rebuilt shape {expect:?}"
    );
    restore_params(trainer.upsampler.params_mut(), &up_params)?;
    trainer.meta_opt = meta_opt;
    trainer.up_opt = up_opt;
    trainer.task_rng = task_rng;
    trainer.up_rng = up_rng;
    trainer.cycles_done = cycles_done;
    trainer.up_iterations_done = up_iterations_done;
    Ok(LoadedTrainer {
        digest,
        seed,
        trainer,
    })
}
