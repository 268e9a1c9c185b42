//! Rank execution: each rank is an OS thread with its own transport
//! endpoint and worker pool. Reductions are deterministic: partial values
//! are keyed by global cube id and summed in id order on every rank.

use crate::error::{Error, Result};
use crate::transport::{Endpoint, Perturbation, RankId, Transport};

pub struct RankCtx {
    pub ep: Endpoint,
    pool: rayon::ThreadPool,
}

impl RankCtx {
    pub fn rank(&self) -> RankId {
        self.ep.rank()
    }

    pub fn size(&self) -> usize {
        self.ep.size()
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Run `f` on this rank's worker pool.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    /// Global sum of per-cube partials `(global id, value)`, added in global
    /// id order so the result does not depend on the rank layout.
    pub fn sum_by_cube(&self, partials: &[(usize, f64)]) -> Result<f64> {
        let all = self.gather_by_cube(partials)?;
        Ok(all.iter().fold(0.0, |s, (_, v)| s + v))
    }

    /// Every rank's `(global id, value)` pairs, merged and sorted by id.
    pub fn gather_by_cube(&self, partials: &[(usize, f64)]) -> Result<Vec<(usize, f64)>> {
        self.gather_by_cube_vec(
            &partials
                .iter()
                .map(|&(g, v)| (g, vec![v]))
                .collect::<Vec<_>>(),
        )
        .map(|v| v.into_iter().map(|(g, x)| (g, x[0])).collect())
    }

    /// As [`Self::gather_by_cube`] with a fixed-length vector per cube.
    pub fn gather_by_cube_vec(
        &self,
        partials: &[(usize, Vec<f64>)],
    ) -> Result<Vec<(usize, Vec<f64>)>> {
        let width = partials.first().map_or(0, |p| p.1.len());
        let mut bytes = Vec::with_capacity(16 + partials.len() * (8 + width * 8));
        bytes.extend_from_slice(&(partials.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(width as u64).to_le_bytes());
        for (g, v) in partials {
            debug_assert_eq!(v.len(), width);
            bytes.extend_from_slice(&(*g as u64).to_le_bytes());
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let gathered = if self.size() == 1 {
            vec![bytes]
        } else {
            self.ep.allgather(bytes)?
        };
        let mut out = Vec::new();
        for b in gathered {
            let rd = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
            let n = rd(0) as usize;
            let w = rd(8) as usize;
            let mut o = 16;
            for _ in 0..n {
                let g = rd(o) as usize;
                o += 8;
                let v = (0..w).map(|k| f64::from_bits(rd(o + 8 * k))).collect();
                o += 8 * w;
                out.push((g, v));
            }
        }
        out.sort_by_key(|(g, _)| *g);
        Ok(out)
    }

    /// Global maximum (order does not matter for max).
    pub fn max(&self, value: f64) -> Result<f64> {
        if self.size() == 1 {
            return Ok(value);
        }
        let all = self.ep.allgather_f64(&[value])?;
        Ok(all.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn sum_u64(&self, value: u64) -> Result<u64> {
        if self.size() == 1 {
            return Ok(value);
        }
        Ok(self.ep.allgather_u64(&[value])?.iter().map(|v| v[0]).sum())
    }
}

/// Run `f` on `ranks` concurrent ranks with `threads` workers each and
/// return the per-rank results in rank order.
pub fn run_ranks<R, F>(
    ranks: usize,
    threads: usize,
    perturbation: Option<Perturbation>,
    f: F,
) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&RankCtx) -> Result<R> + Sync,
{
    if threads == 0 {
        return Err(Error::Config("thread count must be positive".into()));
    }
    let (transport, endpoints) = Transport::new(ranks, perturbation)?;
    let mut ctxs = Vec::with_capacity(ranks);
    for ep in endpoints {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(move |i| format!("worker-{i}"))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        ctxs.push(RankCtx { ep, pool });
    }
    let results: Vec<Result<R>> = std::thread::scope(|s| {
        let handles: Vec<_> = ctxs
            .iter()
            .map(|ctx| {
                let f = &f;
                let transport = &transport;
                s.spawn(move || {
                    let r = ctx.install(|| f(ctx));
                    if r.is_err() {
                        // unblock peers waiting on this rank
                        transport.close();
                    }
                    r
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Numerics("rank panicked".into())))
            })
            .collect()
    });
    // report the root cause rather than a peer's closed-transport error
    if let Some(pos) = results
        .iter()
        .position(|r| matches!(r, Err(e) if !matches!(e, Error::TransportClosed)))
    {
        return Err(results.into_iter().nth(pos).unwrap().err().unwrap());
    }
    results.into_iter().collect()
}
