//! Multi-threaded seed search with a deterministic merge: candidates are
//! evaluated across worker threads in seed chunks, gathered, and passed
//! through the same top-k ordering as the sequential path, so both produce
//! identical pools.

use anyhow::Result;
use harmony_core::backbone::ToyModel;
use harmony_core::pns::{eval_candidate, select_top_k, SearchContext, SeedPool};
use harmony_core::scene::SceneSpec;
use harmony_core::scorer::AlignmentScorer;

pub fn default_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Parallel counterpart of `harmony_core::pns::seed_search`.
pub fn parallel_seed_search(
    model: &ToyModel,
    target: &SceneSpec,
    scorer: &(dyn AlignmentScorer + Sync),
    threads: usize,
) -> Result<SeedPool> {
    let n = model.cfg.pool_size;
    let k = model.cfg.top_k;
    let ctx = SearchContext::for_scene(model, target)?;
    let threads = threads.clamp(1, n.max(1));
    let results: Vec<_> = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(threads);
        for worker in 0..threads {
            let ctx = &ctx;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut seed = worker as u64;
                while (seed as usize) < n {
                    out.push(eval_candidate(model, ctx, target, scorer, seed));
                    seed += threads as u64;
                }
                out
            }));
        }
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("search worker panicked"))
            .collect()
    });
    let mut candidates = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    for res in results {
        let (cand, warning) = res?;
        candidates.push(cand);
        if let Some(w) = warning {
            warnings.push(w);
        }
    }
    // deterministic merge regardless of thread interleaving
    warnings.sort();
    Ok(SeedPool {
        prompt_key: target.caption.clone(),
        candidates: select_top_k(candidates, k),
        warnings,
    })
}
