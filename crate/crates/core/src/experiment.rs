//! End-to-end run orchestration: dataset construction, model wiring,
//! honest or attack training loops, detection and defense hooks, and the
//! final metrics.

use crate::attack::{
    self, malicious_round, plain_discriminator_round, pretrain_epoch, sync_round, AttackModels,
    AttackOptimizers, AttackVariant,
};
use crate::config::{DatasetConfig, ExperimentConfig, Mode};
use crate::data::{self, Dataset, SplitSpec, VerticalPartition};
use crate::defend;
use crate::detect::{self, Decision, GradNormProfile, GsState, SgState};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::Network;
use crate::optim::Optimizer;
use crate::protocol::{honest_round, SystemOptimizers, VflSystem};
use crate::report::{FinalMetrics, MetricsReport, RoundTrace};
use crate::seed::component_rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Epoch-style batching: a seeded reshuffle whenever the index pool runs dry.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, mut rng: ChaCha8Rng) -> BatchSampler {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            pos: 0,
            batch: batch.min(n),
            rng,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Per-run detector state for the first passive client, plus the oracle
/// label channel driving fake batches.
struct Detectors {
    sg: Option<SgState>,
    gs: Option<GsState>,
    profile: Option<GradNormProfile>,
    schedule_rng: ChaCha8Rng,
    halving_rng: ChaCha8Rng,
    num_classes: usize,
    last_regular: Option<Vec<Vec<f64>>>,
    halted: bool,
    halt_on_detection: bool,
}

impl Detectors {
    fn new(cfg: &ExperimentConfig, seed: u64, num_classes: usize) -> Detectors {
        let d = &cfg.detection;
        Detectors {
            sg: d.sg_enabled.then(|| {
                SgState::new(
                    d.sg_fake_probability,
                    d.sg_warmup_rounds,
                    d.sg_threshold,
                    d.sg_window,
                )
            }),
            gs: d.gs_enabled.then(|| GsState::new(d.gs_threshold)),
            profile: d.norm_profile_enabled.then(GradNormProfile::default),
            schedule_rng: component_rng(seed, "sg-schedule", 0),
            halving_rng: component_rng(seed, "sg-halving", 0),
            num_classes,
            last_regular: None,
            halted: false,
            halt_on_detection: d.halt_on_detection,
        }
    }

    /// Possibly corrupt this round's labels for a probe batch.
    fn round_labels(&mut self, labels: &[usize], round: usize) -> Result<(Vec<usize>, bool)> {
        if let Some(sg) = &self.sg {
            if round >= sg.warmup_rounds
                && self.schedule_rng.gen::<f64>() < sg.fake_probability
                && self.num_classes >= 2
            {
                let fakes =
                    detect::sg_fake_batch(labels, self.num_classes, &mut self.schedule_rng)?;
                return Ok((fakes, true));
            }
        }
        Ok((labels.to_vec(), false))
    }

    fn observe(
        &mut self,
        round: usize,
        grads: &Tensor,
        labels: &[usize],
        fake: bool,
        trace: &mut RoundTrace,
    ) -> Result<()> {
        let rows: Vec<Vec<f64>> = (0..grads.rows()).map(|i| grads.row(i).to_vec()).collect();
        if fake {
            if let (Some(sg), Some(reg)) = (&mut self.sg, &self.last_regular) {
                let score = detect::sg_score(&rows, reg, &mut self.halving_rng)?;
                detect::sg_update(sg, score, round);
                trace.sg_score = Some(score);
                trace.sg_trailing = sg.trailing_mean();
            }
        } else {
            self.last_regular = Some(rows.clone());
            if let Some(gs) = &mut self.gs {
                if let Some(score) = detect::gs_score(&rows, labels) {
                    gs.update(score, round);
                    trace.gs_score = Some(score);
                    trace.gs_running = gs.running_mean();
                }
            }
            if let Some(p) = &mut self.profile {
                p.record_round(grads);
            }
        }
        if self.halt_on_detection && self.detected() {
            self.halted = true;
        }
        Ok(())
    }

    fn detected(&self) -> bool {
        self.sg
            .as_ref()
            .is_some_and(|s| s.decision == Decision::Detected)
            || self
                .gs
                .as_ref()
                .is_some_and(|s| s.decision == Decision::Detected)
    }

    fn finals(&self, finals: &mut FinalMetrics) {
        if let Some(sg) = &self.sg {
            finals.sg_detected_round = sg.detected_at;
            finals.sg_trailing_mean = sg.trailing_mean();
        }
        if let Some(gs) = &self.gs {
            finals.gs_detected_round = gs.detected_at;
            finals.gs_running_mean = gs.running_mean();
        }
    }

    /// Stride-subsampled norms so profile comparisons keep a stable sample
    /// size.
    fn norms(&self, cap: usize) -> Vec<f64> {
        let Some(p) = &self.profile else {
            return Vec::new();
        };
        if p.norms.is_empty() || cap == 0 {
            return Vec::new();
        }
        let stride = (p.norms.len() + cap - 1) / cap;
        p.norms
            .iter()
            .copied()
            .step_by(stride.max(1))
            .take(cap)
            .collect()
    }
}

struct RunData {
    partition: VerticalPartition,
    aux: Dataset,
    train: Dataset,
    test: Dataset,
    target_columns: Vec<usize>,
}

fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<RunData> {
    let raw = match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            dims,
            per_class,
            separation,
            seed: fixed,
        } => data::generate_gaussian_mixture(
            *classes,
            *dims,
            *per_class,
            *separation,
            fixed.unwrap_or_else(|| crate::seed::derive(seed, "data", 0)),
        )?,
        DatasetConfig::Csv { path, label_column } => {
            let (ds, _) = data::load_csv_dataset(std::path::Path::new(path), label_column)?;
            ds
        }
    };
    let (ds, _) = data::standardize(&raw)?;
    let spec = SplitSpec {
        aux_ratio: cfg.splits.aux_ratio,
        test_fraction: cfg.splits.test_fraction,
        seed: crate::seed::derive(seed, "split", 0),
    };
    let (aux, train, test) = data::make_splits(&ds, &spec)?;
    let partition = data::vertical_partition(ds.dims(), &cfg.partition_fractions)?;
    let target_columns = match &cfg.target_columns {
        Some(cols) => {
            let passive = partition.all_passive_columns();
            if cols.iter().any(|c| !passive.contains(c)) {
                return Err(Error::config("target column not held by a passive client"));
            }
            cols.clone()
        }
        None => partition.all_passive_columns(),
    };
    Ok(RunData {
        partition,
        aux,
        train,
        test,
        target_columns,
    })
}

fn build_bottoms(
    cfg: &ExperimentConfig,
    partition: &VerticalPartition,
    seed: u64,
) -> Result<(Option<Network>, Vec<Network>)> {
    let emb = cfg.model.embedding_dim;
    let act = cfg.model.activation;
    let fa = if partition.adversary_columns().is_empty() {
        None
    } else {
        let mut dims = vec![partition.adversary_columns().len()];
        dims.extend(&cfg.model.bottom_hidden);
        dims.push(emb);
        Some(Network::mlp(
            &dims,
            act,
            &mut component_rng(seed, "init-adversary", 0),
        )?)
    };
    let mut bottoms = Vec::new();
    for n in 0..partition.passive_count() {
        let mut dims = vec![partition.passive_columns(n).len()];
        dims.extend(&cfg.model.bottom_hidden);
        dims.push(emb);
        bottoms.push(Network::mlp(
            &dims,
            act,
            &mut component_rng(seed, "init-passive", n as u64),
        )?);
    }
    Ok((fa, bottoms))
}

fn run_honest(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &RunData,
) -> Result<(Vec<RoundTrace>, FinalMetrics, Vec<f64>)> {
    let classes = data.train.num_classes;
    let (fa, bottoms) = build_bottoms(cfg, &data.partition, seed)?;
    let emb_total = fa.as_ref().map_or(0, |n| n.output_dim())
        + bottoms.iter().map(|n| n.output_dim()).sum::<usize>();
    let mut dims = vec![emb_total];
    dims.extend(&cfg.model.top_hidden);
    dims.push(classes);
    let top = Network::mlp(
        &dims,
        cfg.model.activation,
        &mut component_rng(seed, "init-top", 0),
    )?;
    let mut sys = VflSystem::new(top, fa, bottoms, data.partition.clone(), classes)?;
    let mut opts = SystemOptimizers::adam(cfg.training.lr, sys.passive_bottoms.len());
    let mut defense_rng = component_rng(seed, "defense", 0);
    let mut sampler = BatchSampler::new(
        data.train.len(),
        cfg.training.batch_size,
        component_rng(seed, "batch", 0),
    );
    let mut detectors = Detectors::new(cfg, seed, classes);

    let rounds_per_epoch =
        (data.train.len() + cfg.training.batch_size - 1) / cfg.training.batch_size;
    let total_rounds = cfg.training.honest_epochs * rounds_per_epoch;
    let mut traces = Vec::with_capacity(total_rounds);
    for round in 0..total_rounds {
        let batch = sampler.next_batch();
        let labels: Vec<usize> = batch.iter().map(|&i| data.train.labels[i]).collect();
        let (used, fake) = detectors.round_labels(&labels, round)?;
        let rec = honest_round(
            &mut sys,
            &data.train.features,
            &used,
            &batch,
            &mut opts,
            &cfg.defense,
            &mut defense_rng,
            round,
            !detectors.halted,
        )?;
        let mut trace = RoundTrace {
            round,
            loss: rec.loss,
            ..Default::default()
        };
        detectors.observe(round, &rec.defended_gradients[0], &labels, fake, &mut trace)?;
        traces.push(trace);
    }
    let mut finals = FinalMetrics {
        accuracy: Some(sys.accuracy(&data.test)?),
        ..Default::default()
    };
    detectors.finals(&mut finals);
    let norms = detectors.norms(cfg.detection.ks_max_samples);
    Ok((traces, finals, norms))
}

fn build_attack_models(
    cfg: &ExperimentConfig,
    data: &RunData,
    fa: Option<Network>,
    passive_emb_total: usize,
    classes: usize,
    seed: u64,
) -> Result<AttackModels> {
    let act = cfg.model.activation;
    let variant = cfg.mode.variant().expect("attack mode");
    let mut enc_dims = vec![data.partition.all_passive_columns().len()];
    enc_dims.extend(&cfg.model.bottom_hidden);
    enc_dims.push(passive_emb_total);
    let encoder = Network::mlp(&enc_dims, act, &mut component_rng(seed, "init-encoder", 0))?;

    let fa_out = fa.as_ref().map_or(0, |n| n.output_dim());
    let mut dec_dims = vec![fa_out + passive_emb_total];
    dec_dims.extend(&cfg.model.decoder_hidden);
    dec_dims.push(data.target_columns.len());
    let decoder = Network::mlp(&dec_dims, act, &mut component_rng(seed, "init-decoder", 0))?;

    let head = if variant == AttackVariant::PlainDiscriminator {
        2
    } else {
        2 * classes
    };
    let mut dac_dims = vec![passive_emb_total];
    dac_dims.extend(&cfg.model.dac_hidden);
    dac_dims.push(head);
    let dac = Network::mlp(&dac_dims, act, &mut component_rng(seed, "init-dac", 0))?;

    AttackModels::new(encoder, decoder, dac, fa, classes)
}

/// Split the concatenated passive gradient back into per-client tensors.
fn split_passive(g: &Tensor, bottoms: &[Network]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(bottoms.len());
    let mut offset = 0;
    for net in bottoms {
        let w = net.output_dim();
        let cols: Vec<usize> = (offset..offset + w).collect();
        out.push(g.select_cols(&cols));
        offset += w;
    }
    if offset != g.cols() {
        return Err(Error::shape(format!(
            "gradient width {} does not match total embedding width {}",
            g.cols(),
            offset
        )));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_attack(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &RunData,
) -> Result<(Vec<RoundTrace>, FinalMetrics, Vec<f64>)> {
    let classes = data.train.num_classes;
    let attack_cfg = cfg.attack_for_mode();
    attack_cfg.validate()?;
    let variant = attack_cfg.variant;

    let (fa, mut bottoms) = build_bottoms(cfg, &data.partition, seed)?;
    let passive_emb_total: usize = bottoms.iter().map(|n| n.output_dim()).sum();
    let mut models = build_attack_models(cfg, data, fa, passive_emb_total, classes, seed)?;
    let mut attack_opts = AttackOptimizers::adam(&attack_cfg);
    let mut passive_opts: Vec<Optimizer> = vec![Optimizer::adam(cfg.training.lr); bottoms.len()];
    let mut defense_rng = component_rng(seed, "defense", 0);
    let all_passive_cols = data.partition.all_passive_columns();

    // labels as the attack consumes them; the shuffled control breaks the
    // label-gradient correlation without touching anything else
    let mut train_labels = data.train.labels.clone();
    let mut aux_labels = data.aux.labels.clone();
    if cfg.label_shuffle_control {
        let mut rng = component_rng(seed, "label-shuffle", 0);
        train_labels.shuffle(&mut rng);
        aux_labels.shuffle(&mut rng);
    }

    // phase 1: surrogate pretraining on the auxiliary split
    if variant != AttackVariant::UrvflSync {
        let mut prng = component_rng(seed, "pretrain-batch", 0);
        for _ in 0..attack_cfg.pretrain_epochs {
            pretrain_epoch(
                &mut models,
                &data.aux,
                &data.partition,
                &data.target_columns,
                &mut attack_opts,
                attack_cfg.aux_batch_size,
                &mut prng,
            )?;
        }
        models.freeze();
    }

    let mut sampler = BatchSampler::new(
        data.train.len(),
        attack_cfg.train_batch_size,
        component_rng(seed, "batch", 0),
    );
    let mut aux_rng = component_rng(seed, "aux-batch", 0);
    let mut detectors = Detectors::new(cfg, seed, classes);

    let mut traces = Vec::with_capacity(cfg.training.attack_rounds);
    for round in 0..cfg.training.attack_rounds {
        let batch = sampler.next_batch();
        let labels_attack: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
        let labels_true: Vec<usize> = batch.iter().map(|&i| data.train.labels[i]).collect();
        let (used, fake) = detectors.round_labels(&labels_attack, round)?;

        // passive uploads, obfuscated at the client
        let (_, x_p) = sys_client_inputs(&data.partition, &bottoms, &data.train.features, &batch);
        let mut uploads = Vec::with_capacity(bottoms.len());
        for (net, x) in bottoms.iter().zip(&x_p) {
            let h = net.forward_values(x)?;
            uploads.push(defend::obfuscate_embeddings(
                &h,
                cfg.defense.noise_sigma,
                &mut defense_rng,
            ));
        }
        let upload_refs: Vec<&Tensor> = uploads.iter().collect();
        let h_p = Tensor::concat_cols(&upload_refs)?;

        // auxiliary batch drawn with replacement
        let aux_idx: Vec<usize> = (0..attack_cfg.aux_batch_size)
            .map(|_| aux_rng.gen_range(0..data.aux.len()))
            .collect();
        let aux_full = data.aux.features.select_rows(&aux_idx);
        let aux_y: Vec<usize> = aux_idx.iter().map(|&i| aux_labels[i]).collect();
        let aux_passive = aux_full.select_cols(&all_passive_cols);

        let mut trace = RoundTrace {
            round,
            ..Default::default()
        };
        let g = match variant {
            AttackVariant::Urvfl => {
                let (g, l_m, l_d) = malicious_round(
                    &mut models,
                    &h_p,
                    &used,
                    &aux_passive,
                    &aux_y,
                    &mut attack_opts.dac,
                )?;
                trace.loss = l_m;
                trace.l_d = Some(l_d);
                g
            }
            AttackVariant::UrvflSync => {
                let (g, l_r, l_m, l_d) = sync_round(
                    &mut models,
                    &h_p,
                    &used,
                    &aux_full,
                    &aux_y,
                    &data.partition,
                    &data.target_columns,
                    &mut attack_opts,
                )?;
                trace.loss = l_m;
                trace.l_r = Some(l_r);
                trace.l_d = Some(l_d);
                g
            }
            AttackVariant::PlainDiscriminator => {
                let (g, l_adv, l_d) = plain_discriminator_round(
                    &mut models,
                    &h_p,
                    &aux_passive,
                    &mut attack_opts.dac,
                )?;
                trace.loss = l_adv;
                trace.l_d = Some(l_d);
                g
            }
        };

        // gradient return path: per-client split, DP at the client, update
        let per_client = split_passive(&g, &bottoms)?;
        let mut defended = Vec::with_capacity(per_client.len());
        for (n, g_n) in per_client.iter().enumerate() {
            let g_n = defend::dp_laplace_gradients(
                g_n,
                cfg.defense.dp_epsilon,
                cfg.defense.dp_clip,
                &mut defense_rng,
            )?;
            if !detectors.halted {
                crate::protocol::passive_local_update(
                    &mut bottoms[n],
                    &x_p[n],
                    &g_n,
                    cfg.defense.nopeek_alpha,
                    &mut passive_opts[n],
                )?;
            }
            defended.push(g_n);
        }
        detectors.observe(round, &defended[0], &labels_true, fake, &mut trace)?;

        // the attacker's own view of transfer progress
        let x_p_all = data
            .train
            .features
            .select_rows(&batch)
            .select_cols(&all_passive_cols);
        let h_enc = models.encoder.forward_values(&x_p_all)?;
        let (emb_mse, emb_cos) = attack::embedding_distances(&h_enc, &h_p)?;
        trace.emb_mse = Some(emb_mse);
        trace.emb_cos = Some(emb_cos);
        traces.push(trace);
    }

    // reconstruction on the unseen test split, using what the adversary
    // would actually receive
    let test_rows: Vec<usize> = (0..data.test.len()).collect();
    let (x_a_test, x_p_test) =
        sys_client_inputs(&data.partition, &bottoms, &data.test.features, &test_rows);
    let mut test_uploads = Vec::with_capacity(bottoms.len());
    for (net, x) in bottoms.iter().zip(&x_p_test) {
        let h = net.forward_values(x)?;
        test_uploads.push(defend::obfuscate_embeddings(
            &h,
            cfg.defense.noise_sigma,
            &mut defense_rng,
        ));
    }
    let test_refs: Vec<&Tensor> = test_uploads.iter().collect();
    let h_p_test = Tensor::concat_cols(&test_refs)?;
    let recon = attack::reconstruct(&models, x_a_test.as_ref(), &h_p_test)?;
    let truth = data
        .test
        .features
        .select_rows(&test_rows)
        .select_cols(&data.target_columns);
    let recon_mse = metrics::recon_mse(&truth, &recon)?;
    let (psnr, ssim) = {
        let (lo, hi) = truth
            .values()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        let span = (hi - lo).max(1e-12);
        let map = |t: &Tensor| {
            Tensor::new(
                t.shape().to_vec(),
                t.values()
                    .iter()
                    .map(|v| ((v - lo) / span).clamp(0.0, 1.0))
                    .collect(),
            )
        };
        let (p, s) = metrics::image_quality(&map(&truth)?, &map(&recon)?)?;
        (Some(p), Some(s))
    };
    let x_p_all_test = data
        .test
        .features
        .select_rows(&test_rows)
        .select_cols(&all_passive_cols);
    let h_enc_test = models.encoder.forward_values(&x_p_all_test)?;
    let (emb_mse, emb_cos) = attack::embedding_distances(&h_enc_test, &h_p_test)?;

    let mut finals = FinalMetrics {
        recon_mse: Some(recon_mse),
        emb_mse: Some(emb_mse),
        emb_cos: Some(emb_cos),
        psnr,
        ssim,
        ..Default::default()
    };
    detectors.finals(&mut finals);
    let norms = detectors.norms(cfg.detection.ks_max_samples);
    Ok((traces, finals, norms))
}

fn sys_client_inputs(
    partition: &VerticalPartition,
    bottoms: &[Network],
    features: &Tensor,
    rows: &[usize],
) -> (Option<Tensor>, Vec<Tensor>) {
    let batch = features.select_rows(rows);
    let x_a = if partition.adversary_columns().is_empty() {
        None
    } else {
        Some(batch.select_cols(partition.adversary_columns()))
    };
    let x_p = (0..bottoms.len())
        .map(|n| batch.select_cols(partition.passive_columns(n)))
        .collect();
    (x_a, x_p)
}

/// One seeded run; the mode picks the pipeline.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<MetricsReport> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let data = prepare_data(cfg, seed)?;
    let (rounds, finals, grad_norms) = match cfg.mode {
        Mode::Honest => run_honest(cfg, seed, &data)?,
        _ => run_attack(cfg, seed, &data)?,
    };
    Ok(MetricsReport {
        config: cfg.clone(),
        seed,
        rounds,
        finals,
        grad_norms,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// All configured seeds, in order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<MetricsReport>> {
    cfg.seeds.iter().map(|&s| run_experiment(cfg, s)).collect()
}

/// One run per (value, seed) pair, values outermost.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: &str,
    values: &[toml::Value],
) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::new();
    for v in values {
        let c = cfg.with_axis(axis, v)?;
        out.extend(run_all(&c)?);
    }
    Ok(out)
}
