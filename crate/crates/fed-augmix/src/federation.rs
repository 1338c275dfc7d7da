//! Server/client simulation: Dirichlet non-IID partitioning, client
//! sampling, local training with the AugMix consistency defense, and
//! size-weighted aggregation (FedAvg, with a FedProx variant).

use std::time::Instant;

use rand::distributions::{Distribution as _, WeightedIndex};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augmix, AugMixConfig, Image};
use crate::data_io::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{combined_loss, cross_entropy, js_div3, update_lambda, LambdaState, LossConfig};
use crate::models::{forward_on, init_model, ModelSpec, ModelState};
use crate::rng::{self, Rng};
use crate::tensor::{backward, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedProx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Client count.
    pub clients: usize,
    /// Participation fraction per round, in (0, 1].
    pub participation: f64,
    /// Communication rounds.
    pub rounds: usize,
    /// Local epochs.
    pub local_epochs: usize,
    /// Client learning rate.
    pub eta: f64,
    /// Dirichlet concentration for the non-IID partition.
    pub alpha_part: f64,
    pub batch_size: usize,
    pub algorithm: Algorithm,
    /// Proximal coefficient (fedprox only).
    pub mu_prox: f64,
    pub defense_enabled: bool,
    pub aug_cfg: AugMixConfig,
    pub loss_cfg: LossConfig,
    pub model: ModelSpec,
    pub seed: u64,
    /// Serialize clients and zero wall times so two runs emit
    /// byte-identical logs.
    pub deterministic: bool,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients < 1 {
            return Err(Error::config("client count must be at least 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation fraction must lie in (0, 1]"));
        }
        if self.rounds < 1 {
            return Err(Error::config("round count must be at least 1"));
        }
        if self.local_epochs < 1 {
            return Err(Error::config("local epoch count must be at least 1"));
        }
        if self.eta <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        self.model.validate()?;
        self.loss_cfg.validate()?;
        if self.defense_enabled {
            self.aug_cfg.validate()?;
        }
        Ok(())
    }
}

/// One client's shard with a fixed 75/25 train/test split.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl ClientDataset {
    pub fn train_size(&self) -> usize {
        self.train_idx.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_ids: Vec<usize>,
    pub mean_train_loss: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

/// Per-class Dirichlet apportioning of samples across clients, followed
/// by the train/test split. Empty clients are repaired by moving one
/// sample from the largest client.
pub fn dirichlet_partition(
    dataset: &LabeledDataset,
    clients: usize,
    alpha_part: f64,
    rng: &mut Rng,
) -> Result<Vec<ClientDataset>> {
    if clients < 1 || alpha_part <= 0.0 {
        return Err(Error::config("need clients >= 1 and alpha_part > 0"));
    }
    if dataset.len() < clients {
        return Err(Error::config(format!(
            "dataset of {} samples cannot cover {clients} clients",
            dataset.len()
        )));
    }
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for class in 0..dataset.class_count {
        let members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        let props = crate::augment::dirichlet_weights(clients, alpha_part, rng);
        if clients == 1 {
            assignment[0].extend(&members);
            continue;
        }
        let dist = WeightedIndex::new(&props)
            .map_err(|e| Error::config(format!("dirichlet weights: {e}")))?;
        for &idx in &members {
            assignment[dist.sample(rng)].push(idx);
        }
    }
    // repair empties so every client owns at least one sample
    loop {
        let empty = match assignment.iter().position(|a| a.is_empty()) {
            Some(i) => i,
            None => break,
        };
        let largest = (0..clients)
            .max_by_key(|&i| assignment[i].len())
            .expect("nonempty client list");
        if assignment[largest].len() <= 1 {
            return Err(Error::config("too few samples to repair empty clients"));
        }
        let moved = assignment[largest].pop().unwrap();
        assignment[empty].push(moved);
    }
    let mut out = Vec::with_capacity(clients);
    for indices in assignment {
        let mut order = indices;
        order.shuffle(rng);
        let test_count = order.len() / 4;
        let images: Vec<Image> = order.iter().map(|&i| dataset.images[i].clone()).collect();
        let labels: Vec<usize> = order.iter().map(|&i| dataset.labels[i]).collect();
        let n = order.len();
        out.push(ClientDataset {
            images,
            labels,
            train_idx: (test_count..n).collect(),
            test_idx: (0..test_count).collect(),
        });
    }
    Ok(out)
}

/// Uniform sample without replacement of size max(ceil(C*K), 1).
pub fn sample_clients(clients: usize, participation: f64, rng: &mut Rng) -> Vec<usize> {
    let m = ((participation * clients as f64).ceil() as usize).clamp(1, clients);
    let mut ids: Vec<usize> = (0..clients).collect();
    ids.shuffle(rng);
    ids.truncate(m);
    ids.sort_unstable();
    ids
}

/// Size-weighted parameter averaging.
pub fn aggregate(updates: &[(usize, ModelState)], sizes: &[usize]) -> Result<ModelState> {
    assert_eq!(updates.len(), sizes.len());
    let (first_id, first) = &updates[0];
    let total: usize = sizes.iter().sum();
    let mut acc: Vec<Vec<f64>> = first.params().iter().map(|p| vec![0.0; p.len()]).collect();
    for ((id, state), &size) in updates.iter().zip(sizes) {
        let weight = size as f64 / total as f64;
        let params = state.params();
        if params.len() != acc.len() {
            return Err(Error::config(format!("client {id}: parameter count mismatch")));
        }
        for (a, p) in acc.iter_mut().zip(&params) {
            if a.len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "aggregate",
                    lhs: vec![*id, a.len()],
                    rhs: p.shape().to_vec(),
                });
            }
            for (x, &v) in a.iter_mut().zip(p.data()) {
                *x += weight * v;
            }
        }
    }
    let shapes: Vec<Vec<usize>> = first.params().iter().map(|p| p.shape().to_vec()).collect();
    let tensors: Vec<Tensor> = acc
        .into_iter()
        .zip(shapes)
        .map(|(data, shape)| Tensor::new(shape, data))
        .collect();
    let _ = first_id;
    ModelState::from_params(&first.spec, &tensors)
}

fn batch_tensor(images: &[&Image], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * dim);
    for img in images {
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new(vec![images.len(), dim], data)
}

/// Local training per the client loop: E epochs of gradient steps on
/// either plain cross-entropy or the combined AugMix consistency loss.
/// Returns the updated model and the mean per-batch loss.
pub fn client_update(
    client_id: usize,
    global: &ModelState,
    data: &ClientDataset,
    cfg: &FederationConfig,
    rng: &mut Rng,
) -> Result<(ModelState, f64)> {
    let mut model = global.clone();
    let global_params: Vec<Tensor> = global.params();
    let dim = model.spec.input_dim();
    let mut lambda_state = LambdaState::new(&cfg.loss_cfg);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    for _ in 0..cfg.local_epochs {
        let mut order: Vec<usize> = data.train_idx.clone();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&Image> = chunk.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let batch = batch_tensor(&images, dim);
            let graph = Graph::new();
            let (p_orig, params) = forward_on(&model, &graph, &batch)?;

            let mut loss = if cfg.defense_enabled {
                let mut aug1 = Vec::with_capacity(images.len());
                let mut aug2 = Vec::with_capacity(images.len());
                for img in &images {
                    aug1.push(augmix(img, &cfg.aug_cfg, rng)?);
                    aug2.push(augmix(img, &cfg.aug_cfg, rng)?);
                }
                let aug1_refs: Vec<&Image> = aug1.iter().collect();
                let aug2_refs: Vec<&Image> = aug2.iter().collect();
                let b1 = graph.attach(&batch_tensor(&aug1_refs, dim));
                let b2 = graph.attach(&batch_tensor(&aug2_refs, dim));
                let p1 = forward_layers(&model, &params, &b1)?;
                let p2 = forward_layers(&model, &params, &b2)?;
                let l_c = cross_entropy(&p_orig, &labels)?.item()?;
                let d_js = js_div3(&p_orig, &p1, &p2)?.item()?;
                lambda_state = update_lambda(lambda_state, &cfg.loss_cfg, l_c, d_js);
                combined_loss(&p_orig, &p1, &p2, &labels, lambda_state.current_lambda)?
            } else {
                cross_entropy(&p_orig, &labels)?
            };

            if cfg.algorithm == Algorithm::FedProx && cfg.mu_prox != 0.0 {
                let mut prox: Option<Tensor> = None;
                for (w, g) in params.iter().zip(&global_params) {
                    let d = w.sub(&graph.attach(g))?;
                    let term = d.mul(&d)?.sum();
                    prox = Some(match prox {
                        Some(acc) => acc.add(&term)?,
                        None => term,
                    });
                }
                loss = loss.add(&prox.unwrap().scalar_mul(cfg.mu_prox / 2.0))?;
            }

            loss_sum += loss.item()?;
            loss_count += 1;
            let grads = backward(&loss, &params.iter().collect::<Vec<_>>(), false)?;
            let new_params: Vec<Tensor> = params
                .iter()
                .zip(&grads)
                .map(|(p, g)| {
                    let data: Vec<f64> = p
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(w, dw)| w - cfg.eta * dw)
                        .collect();
                    Tensor::new(p.shape().to_vec(), data)
                })
                .collect();
            model = ModelState::from_params(&model.spec, &new_params)?;
        }
    }
    let _ = client_id;
    Ok((model, loss_sum / loss_count.max(1) as f64))
}

/// Forward through attached parameters (shared with other views on the
/// same graph).
fn forward_layers(model: &ModelState, params: &[Tensor], batch: &Tensor) -> Result<Tensor> {
    let layers = model.layer_count();
    let mut h = batch.clone();
    for i in 0..layers {
        h = h.matmul(&params[2 * i])?.add(&params[2 * i + 1])?;
        if i + 1 < layers {
            h = match model.spec.activation {
                crate::models::Activation::Relu => h.relu(),
                crate::models::Activation::Sigmoid => h.sigmoid(),
            };
        }
    }
    Ok(h.softmax())
}

pub struct FederationRun {
    pub initial_model: ModelState,
    pub final_model: ModelState,
    pub records: Vec<RoundRecord>,
    pub partitions: Vec<ClientDataset>,
}

/// T rounds of sample -> client updates -> aggregate, evaluating global
/// test accuracy on the union of client test splits.
pub fn run_federation(cfg: &FederationConfig, data: &LabeledDataset) -> Result<FederationRun> {
    cfg.validate()?;
    let mut part_rng = rng::substream(cfg.seed, "partition", 0, 0);
    let partitions = dirichlet_partition(data, cfg.clients, cfg.alpha_part, &mut part_rng)?;

    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    for p in &partitions {
        for &i in &p.test_idx {
            test_images.push(p.images[i].clone());
            test_labels.push(p.labels[i]);
        }
    }
    if test_images.is_empty() {
        return Err(Error::config("no test samples in any client split"));
    }

    let spec = ModelSpec {
        init_seed: cfg.seed,
        ..cfg.model.clone()
    };
    let initial_model = init_model(&spec)?;
    let mut global = initial_model.clone();
    let mut records = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let mut sample_rng = rng::substream(cfg.seed, "sample", round as u64, 0);
        let ids = sample_clients(cfg.clients, cfg.participation, &mut sample_rng);
        let mut updates = Vec::with_capacity(ids.len());
        let mut sizes = Vec::with_capacity(ids.len());
        let mut loss_acc = 0.0;
        for &k in &ids {
            let mut client_rng = rng::substream(cfg.seed, "client", k as u64, round as u64);
            let (updated, mean_loss) =
                client_update(k, &global, &partitions[k], cfg, &mut client_rng)?;
            loss_acc += mean_loss;
            sizes.push(partitions[k].train_size().max(1));
            updates.push((k, updated));
        }
        global = aggregate(&updates, &sizes)?;
        let test_accuracy = crate::metrics::accuracy(&global, &test_images, &test_labels)?;
        let seconds = if cfg.deterministic {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        };
        records.push(RoundRecord {
            round,
            client_ids: ids.clone(),
            mean_train_loss: loss_acc / ids.len() as f64,
            test_accuracy,
            seconds,
        });
    }
    Ok(FederationRun {
        initial_model,
        final_model: global,
        records,
        partitions,
    })
}

/// Round log CSV: round,client_ids,mean_train_loss,test_accuracy,seconds.
pub fn round_log_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from("round,client_ids,mean_train_loss,test_accuracy,seconds\n");
    for r in records {
        let ids: Vec<String> = r.client_ids.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.3}\n",
            r.round,
            ids.join(";"),
            r.mean_train_loss,
            r.test_accuracy,
            r.seconds
        ));
    }
    out
}
