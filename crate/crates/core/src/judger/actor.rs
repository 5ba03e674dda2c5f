//! Bidirectional LSTM encoder with a two-way softmax head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DctError, Result};
use crate::model::params::{Layout, Slot};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Matrix, ViewMut};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActorConfig {
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct DirectionSlots {
    w_ih: Slot,
    w_hh: Slot,
    bias: Slot,
}

/// Parameter layout of the actor; entry order is the serialization order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActorLayout {
    forward: DirectionSlots,
    backward: DirectionSlots,
    pub head_w: Slot,
    pub head_b: Slot,
    pub layout: Layout,
}

impl ActorLayout {
    fn new(cfg: &ActorConfig) -> Self {
        let (d, h) = (cfg.input_dim, cfg.hidden);
        let mut lay = Layout::default();
        let dir = |name: &str, lay: &mut Layout| DirectionSlots {
            w_ih: lay.push(format!("lstm.{name}.w_ih"), d, 4 * h),
            w_hh: lay.push(format!("lstm.{name}.w_hh"), h, 4 * h),
            bias: lay.push(format!("lstm.{name}.bias"), 1, 4 * h),
        };
        let forward = dir("fwd", &mut lay);
        let backward = dir("bwd", &mut lay);
        let head_w = lay.push("head.weight", 2 * h, 2);
        let head_b = lay.push("head.bias", 1, 2);
        Self {
            forward,
            backward,
            head_w,
            head_b,
            layout: lay,
        }
    }
}

/// Actor parameters in one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Actor<T> {
    config: ActorConfig,
    layout: ActorLayout,
    params: Vec<T>,
}

#[derive(Clone, Debug)]
struct DirectionCache<T> {
    // per processed step, in processing order
    gates: Vec<Vec<T>>,
    cells: Vec<Vec<T>>,
    hiddens: Vec<Vec<T>>,
    order: Vec<usize>,
}

/// Saved activations of one actor evaluation.
#[derive(Clone, Debug)]
pub struct ActorCache<T> {
    input: Matrix<T>,
    fwd: DirectionCache<T>,
    bwd: DirectionCache<T>,
    pooled: Vec<T>,
}

fn flush_subnormal<T: Scalar>(v: &mut [T]) {
    for x in v {
        if x.abs() < T::min_positive_value() {
            *x = T::zero();
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Actor<T> {
    /// Uniform `[-1/sqrt(h), 1/sqrt(h)]` initialisation; the head starts at a
    /// tenth of that range so the initial policy is close to uniform.
    pub fn new(config: ActorConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.hidden == 0 {
            return Err(DctError::Config("actor dimensions must be positive".into()));
        }
        let layout = ActorLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.hidden as f64).sqrt();
        let mut params: Vec<T> = (0..layout.layout.total())
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        let head = layout.head_w.offset..layout.head_b.offset + layout.head_b.len();
        for p in &mut params[head] {
            *p *= T::from_f64_lossy(0.1);
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ActorConfig, params: Vec<T>) -> Result<Self> {
        let layout = ActorLayout::new(&config);
        if params.len() != layout.layout.total() {
            return Err(DctError::Shape(format!(
                "actor expects {} parameters, got {}",
                layout.layout.total(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ActorConfig {
        &self.config
    }

    pub fn layout(&self) -> &ActorLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn run_direction(
        &self,
        slots: &DirectionSlots,
        input: &Matrix<T>,
        reverse: bool,
    ) -> DirectionCache<T> {
        let h = self.config.hidden;
        let steps = input.rows();
        let proj = input.matmul(&Matrix::from_vec(
            self.config.input_dim,
            4 * h,
            slots.w_ih.of(&self.params).to_vec(),
        ));
        let w_hh = slots.w_hh.of(&self.params);
        let bias = slots.bias.of(&self.params);
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        let mut cache = DirectionCache {
            gates: Vec::with_capacity(steps),
            cells: Vec::with_capacity(steps),
            hiddens: Vec::with_capacity(steps),
            order: order.clone(),
        };
        let mut h_prev = vec![T::zero(); h];
        let mut c_prev = vec![T::zero(); h];
        for &t in &order {
            let mut pre: Vec<T> = proj.row(t).iter().zip(bias).map(|(&a, &b)| a + b).collect();
            for (k, &hv) in h_prev.iter().enumerate() {
                if hv != T::zero() {
                    let w = &w_hh[k * 4 * h..(k + 1) * 4 * h];
                    for (p, &wv) in pre.iter_mut().zip(w) {
                        *p += hv * wv;
                    }
                }
            }
            // gate order: input, forget, cell candidate, output
            let mut gates = vec![T::zero(); 4 * h];
            let mut cell = vec![T::zero(); h];
            let mut hid = vec![T::zero(); h];
            for j in 0..h {
                let i_g = sigmoid(pre[j]);
                let f_g = sigmoid(pre[h + j]);
                let g_g = pre[2 * h + j].tanh();
                let o_g = sigmoid(pre[3 * h + j]);
                gates[j] = i_g;
                gates[h + j] = f_g;
                gates[2 * h + j] = g_g;
                gates[3 * h + j] = o_g;
                cell[j] = f_g * c_prev[j] + i_g * g_g;
                hid[j] = o_g * cell[j].tanh();
            }
            h_prev.clone_from(&hid);
            c_prev.clone_from(&cell);
            cache.gates.push(gates);
            cache.cells.push(cell);
            cache.hiddens.push(hid);
        }
        cache
    }

    /// Logits over (discard, keep) plus the activations needed for backprop.
    pub fn logits(&self, state: &Matrix<T>) -> Result<([T; 2], ActorCache<T>)> {
        if state.cols() != self.config.input_dim {
            return Err(DctError::Shape(format!(
                "policy state width {} does not match actor input {}",
                state.cols(),
                self.config.input_dim
            )));
        }
        if state.rows() == 0 {
            return Err(DctError::Shape("empty policy state".into()));
        }
        let h = self.config.hidden;
        let fwd = self.run_direction(&self.layout.forward, state, false);
        let bwd = self.run_direction(&self.layout.backward, state, true);
        let mut pooled = fwd.hiddens.last().expect("non-empty").clone();
        pooled.extend_from_slice(bwd.hiddens.last().expect("non-empty"));
        let w = self.layout.head_w.of(&self.params);
        let b = self.layout.head_b.of(&self.params);
        let mut logits = [b[0], b[1]];
        for k in 0..2 * h {
            logits[0] += pooled[k] * w[2 * k];
            logits[1] += pooled[k] * w[2 * k + 1];
        }
        Ok((
            logits,
            ActorCache {
                input: state.clone(),
                fwd,
                bwd,
                pooled,
            },
        ))
    }

    fn backprop_direction(
        &self,
        slots: &DirectionSlots,
        cache: &DirectionCache<T>,
        input: &Matrix<T>,
        dh_last: &[T],
        grads: &mut [T],
    ) {
        let h = self.config.hidden;
        let steps = cache.order.len();
        let w_hh = slots.w_hh.of(&self.params);
        let mut dgates_all = Matrix::zeros(input.rows(), 4 * h);
        let mut dh = dh_last.to_vec();
        let mut dc = vec![T::zero(); h];
        let one = T::one();
        for s in (0..steps).rev() {
            // gradients decay geometrically along long states; subnormals are
            // flushed (they are slow and carry nothing), and once nothing is
            // left to carry the earlier steps contribute exactly zero
            flush_subnormal(&mut dh);
            flush_subnormal(&mut dc);
            if dh.iter().chain(&dc).all(|v| v.is_zero()) {
                break;
            }
            let g = &cache.gates[s];
            let c = &cache.cells[s];
            let zero_state = vec![T::zero(); h];
            let c_prev = if s > 0 {
                &cache.cells[s - 1]
            } else {
                &zero_state
            };
            let h_prev = if s > 0 {
                &cache.hiddens[s - 1]
            } else {
                &zero_state
            };
            let t = cache.order[s];
            let dgates = dgates_all.row_mut(t);
            for j in 0..h {
                let (i_g, f_g, g_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = c[j].tanh();
                let d_o = dh[j] * tc;
                dc[j] += dh[j] * o_g * (one - tc * tc);
                let d_i = dc[j] * g_g;
                let d_g = dc[j] * i_g;
                let d_f = dc[j] * c_prev[j];
                dgates[j] = d_i * i_g * (one - i_g);
                dgates[h + j] = d_f * f_g * (one - f_g);
                dgates[2 * h + j] = d_g * (one - g_g * g_g);
                dgates[3 * h + j] = d_o * o_g * (one - o_g);
                dc[j] *= f_g;
            }
            flush_subnormal(dgates);
            // recurrent weights and the gradient into the previous hidden state
            let gw = slots.w_hh.of_mut(grads);
            for k in 0..h {
                if h_prev[k] != T::zero() {
                    let row = &mut gw[k * 4 * h..(k + 1) * 4 * h];
                    for (r, &dg) in row.iter_mut().zip(dgates.iter()) {
                        *r += h_prev[k] * dg;
                    }
                }
            }
            for k in 0..h {
                let w = &w_hh[k * 4 * h..(k + 1) * 4 * h];
                dh[k] = w
                    .iter()
                    .zip(dgates.iter())
                    .fold(T::zero(), |a, (&wv, &dg)| a + wv * dg);
            }
        }
        gemm(
            T::one(),
            input.view().t(),
            dgates_all.view(),
            T::one(),
            &mut ViewMut::new(slots.w_ih.of_mut(grads), self.config.input_dim, 4 * h),
        );
        let gb = slots.bias.of_mut(grads);
        for t in 0..dgates_all.rows() {
            for (b, &v) in gb.iter_mut().zip(dgates_all.row(t)) {
                *b += v;
            }
        }
    }

    /// Accumulates parameter gradients given the gradient of the two logits.
    pub fn backward(&self, cache: &ActorCache<T>, dlogits: [T; 2], grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len());
        let h = self.config.hidden;
        let w = self.layout.head_w.of(&self.params).to_vec();
        {
            let gw = self.layout.head_w.of_mut(grads);
            for k in 0..2 * h {
                gw[2 * k] += cache.pooled[k] * dlogits[0];
                gw[2 * k + 1] += cache.pooled[k] * dlogits[1];
            }
        }
        {
            let gb = self.layout.head_b.of_mut(grads);
            gb[0] += dlogits[0];
            gb[1] += dlogits[1];
        }
        let dpooled: Vec<T> = (0..2 * h)
            .map(|k| w[2 * k] * dlogits[0] + w[2 * k + 1] * dlogits[1])
            .collect();
        self.backprop_direction(
            &self.layout.forward,
            &cache.fwd,
            &cache.input,
            &dpooled[..h],
            grads,
        );
        self.backprop_direction(
            &self.layout.backward,
            &cache.bwd,
            &cache.input,
            &dpooled[h..],
            grads,
        );
    }

    /// Gradient-ascent step `params += lr * grads`.
    pub fn ascend(&mut self, grads: &[T], lr: f64) {
        let lr = T::from_f64_lossy(lr);
        for (p, g) in self.params.iter_mut().zip(grads) {
            *p += lr * *g;
        }
    }
}
