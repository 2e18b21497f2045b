//! Drivers for the TV-convergence, runtime-scaling and PSRF experiments.
//! Used by the command-line tool and the acceptance tests.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NdppError, Result};
use crate::kernel::{synth_kernel, LowRankKernel};
use crate::oracle::{self, ExactTable, SubsetCounts};
use crate::samplers::{self, ChainConfig, InitPolicy, KndppChain, NdppConfig, Prepared};
use crate::spectral::NdppSpectrum;

/// RNG for stream `stream` of a run seeded with `seed`. Streams keep the
/// sampler, the baseline and each parallel chain independent and
/// reproducible.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeMode {
    /// k-NDPP chains of `t_iter` iterations each.
    Fixed { k: usize, t_iter: usize },
    /// Random size drawn from `e_k`, chain length `k²`.
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvRow {
    pub samples: usize,
    pub tv_mcmc: f64,
    /// TV of an equal-size i.i.d. draw from the exact table.
    pub tv_exact: f64,
}

#[derive(Debug, Clone)]
pub struct TvCurve {
    pub rows: Vec<TvRow>,
    pub table: ExactTable,
    pub mcmc: SubsetCounts,
    pub baseline: SubsetCounts,
    pub rejections: u64,
    pub sampling_time: Duration,
}

/// `1, 2, 5 × 10^j` from 10 up to `max`, always ending at `max`.
pub fn default_checkpoints(max: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut decade = 10usize;
    while decade <= max {
        for m in [1, 2, 5] {
            let c = m * decade;
            if c < max {
                out.push(c);
            }
        }
        decade = decade.saturating_mul(10);
    }
    if max > 0 {
        out.push(max);
    }
    out
}

/// Draws `max_samples` independent chain outputs and reports the TV to the
/// exact table at each checkpoint, next to an i.i.d. baseline of the same
/// size. Chains use stream 0 of `seed`, the baseline stream 1.
pub fn tv_curve(
    kernel: &LowRankKernel,
    mode: SizeMode,
    max_samples: usize,
    checkpoints: &[usize],
    seed: u64,
) -> Result<TvCurve> {
    let table = match mode {
        SizeMode::Fixed { k, .. } => oracle::exact_kndpp_table(kernel, k)?,
        SizeMode::Unconstrained => oracle::exact_ndpp_table(kernel)?,
    };
    let prep = Prepared::new(kernel, None)?;
    let spectrum = match mode {
        SizeMode::Unconstrained => Some(NdppSpectrum::from_kernel(kernel)?),
        SizeMode::Fixed { .. } => None,
    };
    let mut marks: Vec<usize> = checkpoints
        .iter()
        .copied()
        .filter(|&c| c > 0 && c <= max_samples)
        .collect();
    marks.sort_unstable();
    marks.dedup();

    let mut rng = stream_rng(seed, 0);
    let mut base_rng = stream_rng(seed, 1);
    let mut mcmc = SubsetCounts::default();
    let mut baseline = SubsetCounts::default();
    let mut rows = Vec::with_capacity(marks.len());
    let mut rejections = 0;
    let mut sampling_time = Duration::ZERO;
    let mut next = marks.iter().peekable();
    for i in 1..=max_samples {
        let report = match (mode, &spectrum) {
            (SizeMode::Fixed { k, t_iter }, _) => samplers::mcmc_kndpp(
                kernel,
                &prep,
                &ChainConfig::new(k).with_t_iter(t_iter),
                &mut rng,
            )?,
            (SizeMode::Unconstrained, Some(spec)) => {
                samplers::mcmc_ndpp(kernel, &prep, spec, &NdppConfig::default(), &mut rng)?
            }
            (SizeMode::Unconstrained, None) => {
                unreachable!("spectrum is built for unconstrained runs")
            }
        };
        rejections += report.rejections;
        sampling_time += report.elapsed;
        mcmc.add(report.subset);
        if next.peek() == Some(&&i) {
            next.next();
            let fresh = table.sample_iid(i - baseline.total as usize, &mut base_rng);
            for (s, c) in fresh.counts {
                *baseline.counts.entry(s).or_insert(0) += c;
            }
            baseline.total = i as u64;
            rows.push(TvRow {
                samples: i,
                tv_mcmc: oracle::tv_distance(&mcmc.distribution(), &table.entries),
                tv_exact: oracle::tv_distance(&baseline.distribution(), &table.entries),
            });
        }
    }
    Ok(TvCurve {
        rows,
        table,
        mcmc,
        baseline,
        rejections,
        sampling_time,
    })
}

/// One row of the runtime-scaling benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub leaf_block: usize,
    /// Median over repeated builds of tree + Gram matrix.
    pub build_seconds: f64,
    /// Mean wall time of one k-NDPP sample (`t_iter = k²`), excluding
    /// preprocessing.
    pub mean_sample_seconds: f64,
    pub mean_rejections: f64,
    pub samples: usize,
}

/// Benchmarks `synth_kernel(n, d, seed)`: preprocessing time and mean
/// per-sample time. Small `n` repeat the build so the timing is not
/// dominated by clock resolution.
pub fn bench_row(
    n: usize,
    d: usize,
    k: usize,
    samples: usize,
    seed: u64,
    leaf_block: Option<usize>,
) -> Result<BenchRow> {
    if samples == 0 {
        return Err(NdppError::InvalidArgument(
            "need at least one sample".into(),
        ));
    }
    let kernel = synth_kernel(n, d, seed)?;
    let reps = (100_000 / n.max(1)).clamp(1, 25);
    let mut builds = Vec::with_capacity(reps);
    let mut prep = None;
    for _ in 0..reps {
        let p = Prepared::new(&kernel, leaf_block)?;
        builds.push(p.build_time.as_secs_f64());
        prep = Some(p);
    }
    let prep = prep.expect("at least one build");
    builds.sort_by(f64::total_cmp);
    let build_seconds = builds[builds.len() / 2];

    let mut rng = stream_rng(seed, 0);
    let cfg = ChainConfig::new(k);
    let start = Instant::now();
    let mut rejections = 0;
    for _ in 0..samples {
        rejections += samplers::mcmc_kndpp(&kernel, &prep, &cfg, &mut rng)?.rejections;
    }
    let total = start.elapsed().as_secs_f64();
    Ok(BenchRow {
        n,
        d,
        k,
        leaf_block: prep.tree.leaf_block(),
        build_seconds,
        mean_sample_seconds: total / samples as f64,
        mean_rejections: rejections as f64 / samples as f64,
        samples,
    })
}

/// PSRF of `log det(L_S)` across chains after each iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PsrfTrace {
    /// `(iteration, R̂)` for iterations 4, 5, ….
    pub points: Vec<(usize, f64)>,
}

impl PsrfTrace {
    /// First iteration at which `R̂` drops below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.points
            .iter()
            .find(|(_, r)| *r < threshold)
            .map(|(t, _)| *t)
    }
}

/// Runs `chains` independent k-NDPP chains from uniform random starts for
/// `max_iter` iterations. After iteration `t` the statistic is computed on
/// the second half of each chain's history, `t/2..t`.
pub fn psrf_trace(
    kernel: &LowRankKernel,
    k: usize,
    chains: usize,
    max_iter: usize,
    seed: u64,
) -> Result<PsrfTrace> {
    if chains < 2 {
        return Err(NdppError::InvalidArgument(
            "psrf needs at least two chains".into(),
        ));
    }
    let prep = Prepared::new(kernel, None)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..chains as u64).map(|c| stream_rng(seed, c)).collect();
    let mut running = Vec::with_capacity(chains);
    for rng in rngs.iter_mut() {
        running.push(KndppChain::start(
            kernel,
            &prep,
            k,
            &InitPolicy::UniformRetry,
            samplers::DEFAULT_MAX_REJECTS,
            rng,
        )?);
    }
    let log_det =
        |s: &[usize]| -> Result<f64> { Ok(kernel.det_subset(s)?.max(f64::MIN_POSITIVE).ln()) };
    let mut history: Vec<Vec<f64>> = vec![Vec::with_capacity(max_iter); chains];
    let mut points = Vec::new();
    for t in 1..=max_iter {
        for ((chain, rng), hist) in running
            .iter_mut()
            .zip(rngs.iter_mut())
            .zip(history.iter_mut())
        {
            chain.step(rng)?;
            hist.push(log_det(chain.state())?);
        }
        if t >= 4 {
            let window: Vec<Vec<f64>> = history.iter().map(|h| h[t / 2..t].to_vec()).collect();
            points.push((t, oracle::psrf(&window)?));
        }
    }
    Ok(PsrfTrace { points })
}
