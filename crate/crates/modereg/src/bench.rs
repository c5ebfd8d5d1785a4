//! Fused versus naive neighborhood attention: wall time and auxiliary heap.

use std::fmt;
use std::time::{Duration, Instant};

use modereg_core::attention::{
    naive_window_bytes, neighborhood_attention_fused, neighborhood_attention_naive, AttentionConfig, AttentionWeights,
    RelPosBias, TokenMap,
};
use modereg_core::{Dims, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alloc_meter;

/// Largest fused auxiliary memory allowed, as a fraction of the naive
/// window allocation.
pub const MEMORY_RATIO_LIMIT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub dims: Dims,
    pub heads: usize,
    pub head_dim: usize,
    pub neighborhood: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { dims: Dims::cube(32), heads: 8, head_dim: 6, neighborhood: 3, reps: 3, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelStats {
    /// Fastest of the repetitions.
    pub time: Duration,
    /// Peak heap growth during a call minus the returned weights.
    pub aux_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub fused: KernelStats,
    pub naive: KernelStats,
    /// Size of the key-window tensor the naive kernel materializes.
    pub naive_window_bytes: usize,
    pub max_abs_diff: f32,
    /// False when no counting allocator is installed; memory figures are
    /// then zero and the memory check fails.
    pub memory_measured: bool,
}

impl BenchReport {
    pub fn memory_ratio(&self) -> f64 {
        self.fused.aux_bytes as f64 / self.naive.aux_bytes.max(1) as f64
    }

    pub fn time_ratio(&self) -> f64 {
        self.fused.time.as_secs_f64() / self.naive.time.as_secs_f64().max(f64::MIN_POSITIVE)
    }

    pub fn memory_ok(&self) -> bool {
        self.memory_measured && self.naive.aux_bytes > 0 && self.memory_ratio() <= MEMORY_RATIO_LIMIT
    }

    pub fn time_ok(&self) -> bool {
        self.fused.time <= self.naive.time
    }

    pub fn passed(&self) -> bool {
        self.memory_ok() && self.time_ok()
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(f, "neighborhood attention, dims {} heads {} head_dim {} n {}", c.dims, c.heads, c.head_dim, c.neighborhood)?;
        writeln!(f, "{:<8} {:>12} {:>16}", "kernel", "time_ms", "aux_bytes")?;
        for (name, s) in [("fused", &self.fused), ("naive", &self.naive)] {
            writeln!(f, "{:<8} {:>12.2} {:>16}", name, s.time.as_secs_f64() * 1e3, s.aux_bytes)?;
        }
        writeln!(f, "naive window allocation {} bytes", self.naive_window_bytes)?;
        writeln!(f, "max |fused - naive| {:.3e}", self.max_abs_diff)?;
        if !self.memory_measured {
            writeln!(f, "memory not measured: counting allocator not installed")?;
        }
        writeln!(
            f,
            "memory ratio {:.5} (limit {MEMORY_RATIO_LIMIT}) {}",
            self.memory_ratio(),
            verdict(self.memory_ok())
        )?;
        write!(f, "time ratio {:.3} (limit 1) {}", self.time_ratio(), verdict(self.time_ok()))
    }
}

fn random_tokens(dims: Dims, width: usize, rng: &mut ChaCha8Rng) -> Result<TokenMap<f32>> {
    let data = (0..dims.len() * width).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    TokenMap::new(dims, width, data)
}

fn run_kernel(
    reps: usize,
    mut kernel: impl FnMut() -> Result<AttentionWeights<f32>>,
) -> Result<(KernelStats, AttentionWeights<f32>)> {
    let mut best = Duration::MAX;
    let mut aux = 0;
    let mut out = None;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let (w, peak) = alloc_meter::measure(&mut kernel);
        best = best.min(t.elapsed());
        let w = w?;
        aux = aux.max(peak.saturating_sub(w.data.capacity() * std::mem::size_of::<f32>()));
        out = Some(w);
    }
    Ok((KernelStats { time: best, aux_bytes: aux }, out.expect("at least one repetition")))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let att = AttentionConfig::new(cfg.heads, cfg.head_dim, cfg.neighborhood)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let q = random_tokens(cfg.dims, att.width(), &mut rng)?;
    let k = random_tokens(cfg.dims, att.width(), &mut rng)?;
    let mut b = RelPosBias::zeros(&att);
    b.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5f32..0.5));
    let memory_measured = alloc_meter::installed();
    let (fused, wf) = run_kernel(cfg.reps, || neighborhood_attention_fused(&q, &k, &b, &att))?;
    let (naive, wn) = run_kernel(cfg.reps, || neighborhood_attention_naive(&q, &k, &b, &att))?;
    let max_abs_diff = wf.data.iter().zip(&wn.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    Ok(BenchReport {
        config: *cfg,
        fused,
        naive,
        naive_window_bytes: naive_window_bytes::<f32>(cfg.dims, &att),
        max_abs_diff,
        memory_measured,
    })
}
