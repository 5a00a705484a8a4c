//! Active-client attack machinery: surrogate encoder/decoder pretraining,
//! malicious gradient generation through a class-conditional discriminator,
//! the synchronous variant, a plain real/fake discriminator baseline, and
//! feature reconstruction.

use crate::data::{Dataset, VerticalPartition};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::optim::Optimizer;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackVariant {
    Urvfl,
    UrvflSync,
    PlainDiscriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub variant: AttackVariant,
    pub pretrain_epochs: usize,
    pub aux_batch_size: usize,
    pub train_batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_dac: f64,
    pub lr_adversary: f64,
}

impl Default for AttackConfig {
    fn default() -> AttackConfig {
        AttackConfig {
            variant: AttackVariant::Urvfl,
            pretrain_epochs: 30,
            aux_batch_size: 32,
            train_batch_size: 64,
            lr_encoder: 1e-3,
            lr_decoder: 1e-3,
            lr_dac: 1e-3,
            lr_adversary: 1e-3,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant == AttackVariant::Urvfl && self.pretrain_epochs == 0 {
            return Err(Error::config(
                "urvfl needs at least one pretraining epoch; urvfl_sync trains synchronously",
            ));
        }
        if self.aux_batch_size == 0 || self.train_batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        for (name, lr) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
            ("lr_dac", self.lr_dac),
            ("lr_adversary", self.lr_adversary),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config(format!(
                    "{} must be a finite non-negative rate",
                    name
                )));
            }
        }
        Ok(())
    }
}

/// Index map for the 2C-way discriminator head: real label y sits at y,
/// fake label y at C + y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DacLabelMap {
    pub num_classes: usize,
}

impl DacLabelMap {
    pub fn new(num_classes: usize) -> DacLabelMap {
        DacLabelMap { num_classes }
    }

    pub fn real(&self, y: usize) -> Result<usize> {
        if y >= self.num_classes {
            return Err(Error::contract(format!("label {} out of range", y)));
        }
        Ok(y)
    }

    pub fn fake(&self, y: usize) -> Result<usize> {
        Ok(self.real(y)? + self.num_classes)
    }

    /// (class, is_real)
    pub fn decode(&self, idx: usize) -> Result<(usize, bool)> {
        if idx >= 2 * self.num_classes {
            return Err(Error::contract(format!("index {} out of range", idx)));
        }
        if idx < self.num_classes {
            Ok((idx, true))
        } else {
            Ok((idx - self.num_classes, false))
        }
    }
}

/// The adversary-local surrogate models. `encoder` imitates the collective
/// passive bottoms, `decoder` inverts embeddings back to the target
/// features, and `dac` is the discriminator head driving the transfer.
#[derive(Debug, Clone)]
pub struct AttackModels {
    pub encoder: Network,
    pub decoder: Network,
    pub dac: Network,
    pub adversary_bottom: Option<Network>,
    pub num_classes: usize,
    frozen_checksum: Option<u64>,
}

impl AttackModels {
    pub fn new(
        encoder: Network,
        decoder: Network,
        dac: Network,
        adversary_bottom: Option<Network>,
        num_classes: usize,
    ) -> Result<AttackModels> {
        if dac.input_dim() != encoder.output_dim() {
            return Err(Error::shape(format!(
                "discriminator expects {} inputs but the encoder emits {}",
                dac.input_dim(),
                encoder.output_dim()
            )));
        }
        let fa_out = adversary_bottom.as_ref().map_or(0, |n| n.output_dim());
        if decoder.input_dim() != fa_out + encoder.output_dim() {
            return Err(Error::shape(format!(
                "decoder expects {} inputs but receives {} + {} embedding dims",
                decoder.input_dim(),
                fa_out,
                encoder.output_dim()
            )));
        }
        Ok(AttackModels {
            encoder,
            decoder,
            dac,
            adversary_bottom,
            num_classes,
            frozen_checksum: None,
        })
    }

    fn freeze_digest(&self) -> u64 {
        let fa = self.adversary_bottom.as_ref().map_or(0, |n| n.checksum());
        self.encoder.checksum() ^ fa.rotate_left(17)
    }

    /// Record the encoder and adversary-bottom state; later mutations make
    /// `check_frozen` fail.
    pub fn freeze(&mut self) {
        self.frozen_checksum = Some(self.freeze_digest());
    }

    pub fn check_frozen(&self) -> Result<()> {
        match self.frozen_checksum {
            Some(c) if c != self.freeze_digest() => Err(Error::contract(
                "frozen encoder or adversary bottom was modified",
            )),
            _ => Ok(()),
        }
    }
}

/// Per-model optimizers for the attack side.
#[derive(Debug, Clone)]
pub struct AttackOptimizers {
    pub encoder: Optimizer,
    pub decoder: Optimizer,
    pub dac: Optimizer,
    pub adversary: Optimizer,
}

impl AttackOptimizers {
    pub fn adam(cfg: &AttackConfig) -> AttackOptimizers {
        AttackOptimizers {
            encoder: Optimizer::adam(cfg.lr_encoder),
            decoder: Optimizer::adam(cfg.lr_decoder),
            dac: Optimizer::adam(cfg.lr_dac),
            adversary: Optimizer::adam(cfg.lr_adversary),
        }
    }
}

fn check_target_columns(partition: &VerticalPartition, target_columns: &[usize]) -> Result<()> {
    let passive = partition.all_passive_columns();
    for &c in target_columns {
        if !passive.contains(&c) {
            return Err(Error::contract(format!(
                "target column {} is not held by a passive client",
                c
            )));
        }
    }
    if target_columns.is_empty() {
        return Err(Error::contract("no target columns"));
    }
    Ok(())
}

/// One reconstruction update on a batch of auxiliary rows: encoder and
/// adversary bottom produce embeddings, the decoder inverts them, and all
/// three are stepped on the MSE against the true target features.
pub fn reconstruction_step(
    models: &mut AttackModels,
    batch_full: &Tensor,
    partition: &VerticalPartition,
    target_columns: &[usize],
    opts: &mut AttackOptimizers,
) -> Result<f64> {
    check_target_columns(partition, target_columns)?;
    let x_p = batch_full.select_cols(&partition.all_passive_columns());
    let x_t = batch_full.select_cols(target_columns);

    let mut tape = Tape::new();
    let enc_bound = models.encoder.bind(&mut tape);
    let dec_bound = models.decoder.bind(&mut tape);
    let xp_var = tape.leaf(&x_p, false);
    let h_p = models.encoder.forward(&mut tape, &enc_bound, xp_var)?;
    let (fa_bound, joint) = match &models.adversary_bottom {
        Some(fa) => {
            let bound = fa.bind(&mut tape);
            let xa = batch_full.select_cols(partition.adversary_columns());
            let xa_var = tape.leaf(&xa, false);
            let h_a = fa.forward(&mut tape, &bound, xa_var)?;
            (Some(bound), tape.concat_cols(&[h_a, h_p])?)
        }
        None => (None, h_p),
    };
    let recon = models.decoder.forward(&mut tape, &dec_bound, joint)?;
    let target_var = tape.leaf(&x_t, false);
    let loss = tape.mse(recon, target_var)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    opts.encoder
        .step_network(&mut models.encoder, &enc_bound, &grads)?;
    opts.decoder
        .step_network(&mut models.decoder, &dec_bound, &grads)?;
    if let (Some(fa), Some(bound)) = (&mut models.adversary_bottom, &fa_bound) {
        opts.adversary.step_network(fa, bound, &grads)?;
    }
    Ok(value)
}

/// One pass over the auxiliary set in seeded-shuffled batches; returns the
/// sample-weighted mean reconstruction loss.
pub fn pretrain_epoch(
    models: &mut AttackModels,
    aux: &Dataset,
    partition: &VerticalPartition,
    target_columns: &[usize],
    opts: &mut AttackOptimizers,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if aux.is_empty() {
        return Err(Error::contract("empty auxiliary set"));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..aux.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let rows = aux.features.select_rows(batch);
        let l = reconstruction_step(models, &rows, partition, target_columns, opts)?;
        total += l * batch.len() as f64;
    }
    Ok(total / aux.len() as f64)
}

fn dac_logits(
    tape: &mut Tape,
    models: &AttackModels,
    h: crate::tape::Var,
) -> Result<crate::tape::Var> {
    let bound = models.dac.bind(tape);
    models.dac.forward(tape, &bound, h)
}

/// Gradient of the class-conditional adversarial loss with respect to the
/// received training embeddings. The discriminator is not updated here.
fn adversarial_grads(
    models: &AttackModels,
    h_train: &Tensor,
    targets: &[usize],
) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let h_var = tape.leaf(h_train, true);
    let logits = dac_logits(&mut tape, models, h_var)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    let g = Tensor::new(h_train.shape().to_vec(), grads.of(h_var, h_train.len()))?;
    Ok((g, value))
}

/// Discriminator update: fake-index targets on the (constant) training
/// embeddings plus real-index targets on encoder embeddings of the aux
/// batch. An empty aux batch leaves only the fake term.
fn dac_update(
    models: &mut AttackModels,
    h_train: &Tensor,
    fake_targets: &[usize],
    h_aux: &Tensor,
    real_targets: &[usize],
    opt: &mut Optimizer,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = models.dac.bind(&mut tape);
    let ht_var = tape.leaf(h_train, false);
    let logits_t = models.dac.forward(&mut tape, &bound, ht_var)?;
    let fake_ce = tape.cross_entropy(logits_t, fake_targets)?;
    let loss = if h_aux.rows() > 0 {
        let ha_var = tape.leaf(h_aux, false);
        let logits_a = models.dac.forward(&mut tape, &bound, ha_var)?;
        let real_ce = tape.cross_entropy(logits_a, real_targets)?;
        tape.add(fake_ce, real_ce)?
    } else {
        fake_ce
    };
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    opt.step_network(&mut models.dac, &bound, &grads)?;
    Ok(value)
}

/// One malicious round with the encoder and adversary bottom frozen:
/// compute the gradient sent to the passive clients, then train the
/// discriminator on this round's embeddings.
pub fn malicious_round(
    models: &mut AttackModels,
    h_train: &Tensor,
    labels: &[usize],
    aux_passive: &Tensor,
    aux_labels: &[usize],
    opt_dac: &mut Optimizer,
) -> Result<(Tensor, f64, f64)> {
    models.check_frozen()?;
    let map = DacLabelMap::new(models.num_classes);
    if models.dac.output_dim() != 2 * models.num_classes {
        return Err(Error::shape(format!(
            "discriminator head has {} outputs, expected {}",
            models.dac.output_dim(),
            2 * models.num_classes
        )));
    }
    let real: Vec<usize> = labels.iter().map(|&y| map.real(y)).collect::<Result<_>>()?;
    let (g, l_m) = adversarial_grads(models, h_train, &real)?;

    let fake: Vec<usize> = labels.iter().map(|&y| map.fake(y)).collect::<Result<_>>()?;
    let h_aux = if aux_passive.rows() > 0 {
        models.encoder.forward_values(aux_passive)?
    } else {
        Tensor::zeros(vec![0, models.encoder.output_dim()])
    };
    let aux_real: Vec<usize> = aux_labels
        .iter()
        .map(|&y| map.real(y))
        .collect::<Result<_>>()?;
    let l_d = dac_update(models, h_train, &fake, &h_aux, &aux_real, opt_dac)?;
    models.check_frozen()?;
    Ok((g, l_m, l_d))
}

/// Synchronous variant: a reconstruction step on the aux batch first (the
/// encoder keeps training), then the malicious gradient from this round's
/// embeddings, then the discriminator update against the freshly recomputed
/// aux embeddings.
#[allow(clippy::too_many_arguments)]
pub fn sync_round(
    models: &mut AttackModels,
    h_train: &Tensor,
    labels: &[usize],
    aux_full: &Tensor,
    aux_labels: &[usize],
    partition: &VerticalPartition,
    target_columns: &[usize],
    opts: &mut AttackOptimizers,
) -> Result<(Tensor, f64, f64, f64)> {
    let l_r = if aux_full.rows() > 0 {
        reconstruction_step(models, aux_full, partition, target_columns, opts)?
    } else {
        0.0
    };
    let aux_passive = aux_full.select_cols(&partition.all_passive_columns());
    let map = DacLabelMap::new(models.num_classes);
    let real: Vec<usize> = labels.iter().map(|&y| map.real(y)).collect::<Result<_>>()?;
    let (g, l_m) = adversarial_grads(models, h_train, &real)?;
    let fake: Vec<usize> = labels.iter().map(|&y| map.fake(y)).collect::<Result<_>>()?;
    let h_aux = if aux_passive.rows() > 0 {
        models.encoder.forward_values(&aux_passive)?
    } else {
        Tensor::zeros(vec![0, models.encoder.output_dim()])
    };
    let aux_real: Vec<usize> = aux_labels
        .iter()
        .map(|&y| map.real(y))
        .collect::<Result<_>>()?;
    let l_d = dac_update(models, h_train, &fake, &h_aux, &aux_real, &mut opts.dac)?;
    Ok((g, l_r, l_m, l_d))
}

/// Baseline with a two-way discriminator: passives are pushed toward
/// whatever the head currently calls "real" (index 0), with no label
/// conditioning anywhere.
pub fn plain_discriminator_round(
    models: &mut AttackModels,
    h_train: &Tensor,
    aux_passive: &Tensor,
    opt_dac: &mut Optimizer,
) -> Result<(Tensor, f64, f64)> {
    models.check_frozen()?;
    if models.dac.output_dim() != 2 {
        return Err(Error::shape(format!(
            "plain discriminator needs 2 outputs, has {}",
            models.dac.output_dim()
        )));
    }
    let real = vec![0usize; h_train.rows()];
    let (g, l_adv) = adversarial_grads(models, h_train, &real)?;

    let fake = vec![1usize; h_train.rows()];
    let h_aux = if aux_passive.rows() > 0 {
        models.encoder.forward_values(aux_passive)?
    } else {
        Tensor::zeros(vec![0, models.encoder.output_dim()])
    };
    let aux_real = vec![0usize; h_aux.rows()];
    let l_d = dac_update(models, h_train, &fake, &h_aux, &aux_real, opt_dac)?;
    models.check_frozen()?;
    Ok((g, l_adv, l_d))
}

/// Reconstruct target features from the adversary's own raw features and
/// the passive embeddings. With no adversary features the decoder consumes
/// the passive embeddings alone.
pub fn reconstruct(models: &AttackModels, x_a: Option<&Tensor>, h_p: &Tensor) -> Result<Tensor> {
    let input = match (&models.adversary_bottom, x_a) {
        (Some(fa), Some(xa)) => {
            let h_a = fa.forward_values(xa)?;
            Tensor::concat_cols(&[&h_a, h_p])?
        }
        (None, _) => h_p.clone(),
        (Some(_), None) => {
            return Err(Error::contract(
                "adversary bottom present but no adversary features supplied",
            ))
        }
    };
    models.decoder.forward_values(&input)
}

/// (mean squared elementwise difference, mean over rows of 1 - cosine
/// similarity after L2 row normalization). Zero-norm rows count as fully
/// dissimilar.
pub fn embedding_distances(e: &Tensor, t: &Tensor) -> Result<(f64, f64)> {
    if e.shape() != t.shape() {
        return Err(Error::shape(format!(
            "embedding shapes {:?} vs {:?}",
            e.shape(),
            t.shape()
        )));
    }
    if e.rows() == 0 {
        return Err(Error::contract("no embedding rows"));
    }
    let mse = e
        .values()
        .iter()
        .zip(t.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / e.len() as f64;
    let mut cos_total = 0.0;
    for i in 0..e.rows() {
        let (u, v) = (e.row(i), t.row(i));
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu < 1e-12 || nv < 1e-12 {
            cos_total += 1.0;
            continue;
        }
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        cos_total += 1.0 - dot / (nu * nv);
    }
    Ok((mse, cos_total / e.rows() as f64))
}
