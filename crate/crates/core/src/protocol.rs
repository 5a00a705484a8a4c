//! Split-VFL training loop: bottoms produce embeddings, the active side
//! concatenates them in the fixed order [h_a, h_1, ..., h_N], scores them
//! with the top model, and returns per-embedding gradients.

use crate::data::{Dataset, VerticalPartition};
use crate::defend::{self, DefenseConfig};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::optim::Optimizer;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct VflSystem {
    pub top: Network,
    pub adversary_bottom: Option<Network>,
    pub passive_bottoms: Vec<Network>,
    pub partition: VerticalPartition,
    pub num_classes: usize,
}

impl VflSystem {
    pub fn new(
        top: Network,
        adversary_bottom: Option<Network>,
        passive_bottoms: Vec<Network>,
        partition: VerticalPartition,
        num_classes: usize,
    ) -> Result<VflSystem> {
        if partition.adversary_columns().is_empty() != adversary_bottom.is_none() {
            return Err(Error::contract(
                "adversary bottom must be present exactly when the adversary holds columns",
            ));
        }
        if let Some(fa) = &adversary_bottom {
            if fa.input_dim() != partition.adversary_columns().len() {
                return Err(Error::shape(format!(
                    "adversary bottom expects {} inputs but the partition grants {} columns",
                    fa.input_dim(),
                    partition.adversary_columns().len()
                )));
            }
        }
        if passive_bottoms.len() != partition.passive_count() {
            return Err(Error::shape(format!(
                "{} passive bottoms for {} passive column sets",
                passive_bottoms.len(),
                partition.passive_count()
            )));
        }
        for (n, net) in passive_bottoms.iter().enumerate() {
            let cols = partition.passive_columns(n).len();
            if net.input_dim() != cols {
                return Err(Error::shape(format!(
                    "passive bottom {} expects {} inputs but holds {} columns",
                    n,
                    net.input_dim(),
                    cols
                )));
            }
        }
        let emb_total: usize = adversary_bottom.as_ref().map_or(0, |n| n.output_dim())
            + passive_bottoms
                .iter()
                .map(|n| n.output_dim())
                .sum::<usize>();
        if top.input_dim() != emb_total {
            return Err(Error::shape(format!(
                "top model expects {} inputs but bottoms emit {} embedding dims",
                top.input_dim(),
                emb_total
            )));
        }
        Ok(VflSystem {
            top,
            adversary_bottom,
            passive_bottoms,
            partition,
            num_classes,
        })
    }

    pub fn passive_embedding_dim(&self) -> usize {
        self.passive_bottoms.iter().map(|n| n.output_dim()).sum()
    }

    /// Column slices for each client, batch rows first.
    pub fn client_inputs(
        &self,
        features: &Tensor,
        rows: &[usize],
    ) -> (Option<Tensor>, Vec<Tensor>) {
        let batch = features.select_rows(rows);
        let x_a = if self.adversary_bottom.is_some() {
            Some(batch.select_cols(self.partition.adversary_columns()))
        } else {
            None
        };
        let x_p = (0..self.passive_bottoms.len())
            .map(|n| batch.select_cols(self.partition.passive_columns(n)))
            .collect();
        (x_a, x_p)
    }

    /// Straight evaluation of every passive bottom, concatenated in client
    /// order.
    pub fn passive_embeddings(&self, features: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let (_, x_p) = self.client_inputs(features, rows);
        let hs: Vec<Tensor> = self
            .passive_bottoms
            .iter()
            .zip(&x_p)
            .map(|(net, x)| net.forward_values(x))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = hs.iter().collect();
        Tensor::concat_cols(&refs)
    }

    pub fn predict(&self, features: &Tensor, row: usize) -> Result<usize> {
        let logits = self.logits(features, &[row])?;
        let out = logits.row(0);
        let mut best = 0usize;
        for (i, &v) in out.iter().enumerate() {
            if v > out[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn logits(&self, features: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let (x_a, x_p) = self.client_inputs(features, rows);
        let mut parts: Vec<Tensor> = Vec::new();
        if let (Some(fa), Some(xa)) = (&self.adversary_bottom, &x_a) {
            parts.push(fa.forward_values(xa)?);
        }
        for (net, x) in self.passive_bottoms.iter().zip(&x_p) {
            parts.push(net.forward_values(x)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        self.top.forward_values(&Tensor::concat_cols(&refs)?)
    }

    pub fn accuracy(&self, test: &Dataset) -> Result<f64> {
        let rows: Vec<usize> = (0..test.len()).collect();
        let logits = self.logits(&test.features, &rows)?;
        let mut hits = 0usize;
        for (i, &y) in test.labels.iter().enumerate() {
            let out = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in out.iter().enumerate() {
                if v > out[best] {
                    best = j;
                }
            }
            if best == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / test.len() as f64)
    }
}

/// Per-model optimizer state for honest training.
#[derive(Debug, Clone)]
pub struct SystemOptimizers {
    pub top: Optimizer,
    pub adversary: Optimizer,
    pub passives: Vec<Optimizer>,
}

impl SystemOptimizers {
    pub fn adam(lr: f64, passive_count: usize) -> SystemOptimizers {
        SystemOptimizers {
            top: Optimizer::adam(lr),
            adversary: Optimizer::adam(lr),
            passives: vec![Optimizer::adam(lr); passive_count],
        }
    }
}

/// One round as seen by every party. `embeddings` are the tensors the
/// passive clients uploaded (after any obfuscation), `gradients` the tensors
/// the active client sent back, and `defended_gradients` what each passive
/// client actually consumed after its own gradient defense.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub batch: Vec<usize>,
    pub embeddings: Vec<Tensor>,
    pub gradients: Vec<Tensor>,
    pub defended_gradients: Vec<Tensor>,
    pub loss: f64,
}

/// One synchronous honest round: embedding exchange, top-model CE loss,
/// gradient return, one optimizer step everywhere. `labels` must align with
/// `batch` so callers can substitute randomized labels for probe rounds.
/// `update_passives: false` models halted victims after a detection.
#[allow(clippy::too_many_arguments)]
pub fn honest_round(
    sys: &mut VflSystem,
    features: &Tensor,
    labels: &[usize],
    batch: &[usize],
    opts: &mut SystemOptimizers,
    defense: &DefenseConfig,
    defense_rng: &mut ChaCha8Rng,
    round: usize,
    update_passives: bool,
) -> Result<RoundRecord> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if labels.len() != batch.len() {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch.len()
        )));
    }
    let (x_a, x_p) = sys.client_inputs(features, batch);

    // passive upload, obfuscated before it leaves the client
    let mut uploads: Vec<Tensor> = Vec::with_capacity(x_p.len());
    for (net, x) in sys.passive_bottoms.iter().zip(&x_p) {
        let h = net.forward_values(x)?;
        uploads.push(defend::obfuscate_embeddings(
            &h,
            defense.noise_sigma,
            defense_rng,
        ));
    }

    // active side: differentiate through fa and the top model, treating the
    // uploaded embeddings as leaves so their gradients can be returned
    let mut tape = Tape::new();
    let top_bound = sys.top.bind(&mut tape);
    let mut parts = Vec::new();
    let fa_bound = match (&sys.adversary_bottom, &x_a) {
        (Some(fa), Some(xa)) => {
            let bound = fa.bind(&mut tape);
            let x = tape.leaf(xa, false);
            parts.push(fa.forward(&mut tape, &bound, x)?);
            Some(bound)
        }
        _ => None,
    };
    let h_vars: Vec<_> = uploads.iter().map(|h| tape.leaf(h, true)).collect();
    parts.extend(&h_vars);
    let concat = tape.concat_cols(&parts)?;
    let logits = sys.top.forward(&mut tape, &top_bound, concat)?;
    let loss_var = tape.cross_entropy(logits, labels)?;
    let loss = tape.scalar(loss_var);
    let grads = tape.backward(loss_var)?;

    let sent: Vec<Tensor> = h_vars
        .iter()
        .zip(&uploads)
        .map(|(&v, h)| Tensor::new(h.shape().to_vec(), grads.of(v, h.len())))
        .collect::<Result<_>>()?;

    opts.top.step_network(&mut sys.top, &top_bound, &grads)?;
    if let (Some(fa), Some(bound)) = (&mut sys.adversary_bottom, &fa_bound) {
        opts.adversary.step_network(fa, bound, &grads)?;
    }

    // passive download: DP transform, then the local update
    let mut defended = Vec::with_capacity(sent.len());
    for (n, g) in sent.iter().enumerate() {
        let g = defend::dp_laplace_gradients(g, defense.dp_epsilon, defense.dp_clip, defense_rng)?;
        if update_passives {
            passive_local_update(
                &mut sys.passive_bottoms[n],
                &x_p[n],
                &g,
                defense.nopeek_alpha,
                &mut opts.passives[n],
            )?;
        }
        defended.push(g);
    }

    Ok(RoundRecord {
        round,
        batch: batch.to_vec(),
        embeddings: uploads,
        gradients: sent,
        defended_gradients: defended,
        loss,
    })
}

/// A passive client's local step given the gradient it received for its own
/// embedding. With alpha 0 the received gradient is back-propagated exactly;
/// otherwise the client minimizes alpha * dcor(x, h) plus (1 - alpha) times
/// the inner product of h with the received gradient, whose h-gradient is
/// the received tensor itself.
pub fn passive_local_update(
    bottom: &mut Network,
    x: &Tensor,
    received: &Tensor,
    alpha: f64,
    opt: &mut Optimizer,
) -> Result<()> {
    let mut tape = Tape::new();
    let bound = bottom.bind(&mut tape);
    let x_var = tape.leaf(x, false);
    let h = bottom.forward(&mut tape, &bound, x_var)?;
    if tape.shape(h) != received.shape() {
        return Err(Error::shape(format!(
            "received gradient shape {:?} does not match embedding shape {:?}",
            received.shape(),
            tape.shape(h)
        )));
    }
    let grads = if alpha == 0.0 {
        tape.backward_with(h, received.values())?
    } else {
        let g_leaf = tape.leaf(received, false);
        let prod = tape.mul(h, g_leaf)?;
        let task = tape.sum_all(prod);
        let dcor_term = crate::defend::tape_dcor(&mut tape, x, h)?;
        let loss = crate::defend::nopeek_loss(&mut tape, task, dcor_term, alpha)?;
        tape.backward(loss)?
    };
    opt.step_network(bottom, &bound, &grads)
}

/// Full honest training: a seeded shuffle per epoch shared by all clients,
/// sequential rounds, observer hook per round.
#[allow(clippy::too_many_arguments)]
pub fn run_honest_training(
    sys: &mut VflSystem,
    train: &Dataset,
    epochs: usize,
    batch_size: usize,
    opts: &mut SystemOptimizers,
    defense: &DefenseConfig,
    batch_rng: &mut ChaCha8Rng,
    defense_rng: &mut ChaCha8Rng,
    mut observer: impl FnMut(&RoundRecord) -> Result<bool>,
) -> Result<Vec<RoundRecord>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let mut trace = Vec::new();
    let mut round = 0usize;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(batch_rng);
        for batch in order.chunks(batch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let rec = honest_round(
                sys,
                &train.features,
                &labels,
                batch,
                opts,
                defense,
                defense_rng,
                round,
                true,
            )?;
            let keep_going = observer(&rec)?;
            trace.push(rec);
            round += 1;
            if !keep_going {
                return Ok(trace);
            }
        }
    }
    Ok(trace)
}
