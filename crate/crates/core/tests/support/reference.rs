//! Plain compressive-transformer training loop with no judger: every evicted
//! block is compressed and committed. Used as the keep-all baseline.

use dct_core::data::make_batches;
use dct_core::memory::{compress, compress_backward, StreamMemory};
use dct_core::model::optim::Optimizer;
use dct_core::model::{Model, SegmentInput};
use dct_core::RunConfig;

/// Per-step mean mini-batch loss over `steps` steps.
pub fn keep_all_losses(cfg: &RunConfig, train: &[u8], steps: u64) -> (Vec<f64>, Model<f32>) {
    let plan = make_batches(train, cfg.batch_size, cfg.seg_len).unwrap();
    let mut model = Model::<f32>::new(cfg.model().unwrap(), cfg.seed).unwrap();
    let mut opt = Optimizer::new(
        cfg.optimizer,
        (cfg.clip_norm > 0.0).then_some(cfg.clip_norm),
    );
    let new_mem = || {
        StreamMemory::<f32>::new(
            cfg.layers,
            cfg.d_model,
            cfg.seg_len,
            cfg.mem_len,
            cfg.cmem_len,
            cfg.ratio,
        )
    };
    let mut mems: Vec<_> = (0..cfg.batch_size).map(|_| new_mem()).collect();
    let switch = (cfg.pretrain_epochs * plan.segments_per_stream() as f64).floor() as u64;
    let mb = cfg.batch_size / cfg.minibatches;
    let mut losses = Vec::new();
    let mut seg = 0;
    for step in 0..steps {
        let lr = if step < switch {
            cfg.pretrain_lr
        } else {
            cfg.cotrain_lr
        };
        let mut total = 0.0;
        for g in 0..cfg.minibatches {
            let rows = g * mb..(g + 1) * mb;
            let ctx: Vec<Vec<_>> = rows
                .clone()
                .map(|r| {
                    mems[r]
                        .layers()
                        .iter()
                        .map(|l| l.attention_context())
                        .collect()
                })
                .collect();
            let inputs: Vec<_> = rows
                .clone()
                .zip(&ctx)
                .map(|(r, c)| {
                    let (tokens, targets) = plan.segment(r, seg);
                    SegmentInput {
                        tokens,
                        targets,
                        contexts: c,
                    }
                })
                .collect();
            let (out, cache) = model.forward(&inputs).unwrap();
            total += f64::from(out.loss);
            let mut grads = model.zero_grads();
            let any_fresh = rows.clone().any(|r| {
                mems[r]
                    .layers()
                    .iter()
                    .any(|l| !l.fresh_compressed().is_empty())
            });
            let cg = model.backward(&cache, &mut grads, any_fresh);
            if any_fresh {
                for (i, r) in rows.clone().enumerate() {
                    for l in 0..cfg.layers {
                        let (w, b) = model.compression_grad_slots(l);
                        for (off, blk) in mems[r].layer(l).fresh_compressed() {
                            let g = cg[i][l].slice_rows(off, off + blk.positions());
                            let (head, tail) = grads.split_at_mut(b.offset);
                            compress_backward(
                                blk.source().unwrap(),
                                &g,
                                blk.ratio(),
                                &mut head[w.range()],
                                &mut tail[..b.len()],
                            );
                        }
                    }
                }
            }
            for r in rows.clone() {
                mems[r].clear_fresh();
            }
            model.apply_gradients(&mut opt, &grads, lr).unwrap();
            for (h, r) in out.hidden.into_iter().zip(rows) {
                let span = mems[r].next_span();
                let evicted = mems[r].append_segment(h, span).unwrap();
                for (l, ev) in evicted.into_iter().enumerate() {
                    if ev.is_empty() {
                        continue;
                    }
                    let cb = compress(&ev, model.compression(l)).unwrap();
                    if !cb.is_empty() {
                        mems[r].layer_mut(l).commit_compressed(cb).unwrap();
                    }
                }
            }
        }
        losses.push(total / cfg.minibatches as f64);
        seg += 1;
        if seg == plan.segments_per_stream() {
            seg = 0;
            mems.iter_mut().for_each(|m| m.reset());
        }
    }
    (losses, model)
}
