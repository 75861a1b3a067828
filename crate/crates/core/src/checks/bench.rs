use std::fmt;
use std::time::Instant;

use super::selftest::{random_image, random_model};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, VariantConfig};

pub const MIN_ITERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iters: usize,
    /// Worker threads for the kernels; `None` uses the global pool.
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            iters: 20,
            threads: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub variant: String,
    pub input: (usize, usize),
    pub threads: usize,
    pub samples_ms: Vec<f64>,
}

impl BenchReport {
    pub fn min(&self) -> f64 {
        self.samples_ms
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.samples_ms.iter().sum::<f64>() / self.samples_ms.len() as f64
    }

    pub fn median(&self) -> f64 {
        let mut s = self.samples_ms.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        }
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "variant={} input={}x{} threads={} iters={} min_ms={:.3} median_ms={:.3} mean_ms={:.3}",
            self.variant,
            self.input.0,
            self.input.1,
            self.threads,
            self.samples_ms.len(),
            self.min(),
            self.median(),
            self.mean()
        )
    }
}

/// Times the BN-folded forward pass on seeded random weights.
pub fn bench(cfg: VariantConfig, h: usize, w: usize, bc: &BenchConfig) -> Result<BenchReport> {
    if bc.iters < MIN_ITERS {
        return Err(Error::Argument(format!(
            "iters must be at least {MIN_ITERS}, got {}",
            bc.iters
        )));
    }
    if bc.threads == Some(0) {
        return Err(Error::Argument("threads must be positive".into()));
    }
    cfg.check_input(h, w)?;
    let variant = cfg.variant.to_string();
    let model = random_model(cfg, bc.seed)?.fold_bn()?;
    let img = random_image(h, w, bc.seed)?;
    let run = || -> Result<Vec<f64>> {
        for _ in 0..bc.warmup {
            model.forward(&img, ForwardOptions::default())?;
        }
        (0..bc.iters)
            .map(|_| {
                let t = Instant::now();
                model.forward(&img, ForwardOptions::default())?;
                Ok(t.elapsed().as_secs_f64() * 1e3)
            })
            .collect()
    };
    let (samples_ms, threads) = match bc.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Argument(format!("cannot start thread pool: {e}")))?;
            (pool.install(run)?, n)
        }
        None => (run()?, rayon::current_num_threads()),
    };
    Ok(BenchReport {
        variant,
        input: (h, w),
        threads,
        samples_ms,
    })
}
