//! Server and client state machines for synchronized federated training.
//!
//! A session runs in phases: the server broadcasts its initialization and
//! verifies every client echoes the same content hash; clients then send
//! saliency scores once, the server builds the global top-k mask and
//! broadcasts it once; after that every round exchanges only gradients —
//! sparse for the salient protocol, dense for the FedAvg baseline. Client
//! compute runs on one worker thread per client; the server round is a
//! barrier that gathers all N gradients, aggregates them in ascending
//! client-id order, and broadcasts the average, so after every round all
//! client parameters and the server reference are bitwise identical.

pub mod transport;

use std::sync::Arc;
use std::time::Instant;

use crate::codec::{self, SparseGrad};
use crate::error::{Error, Result};
use crate::masking::{self, GlobalMask};
use crate::nn::{self, Architecture, Batch, GradVector, Manifest, ParamVector};
use crate::saliency::{self, SaliencyScores};
use crate::util::{derive_seed, sha256, TAG_CLIENT, TAG_SALIENCY, TAG_SHUFFLE};
use transport::{Frame, MsgType, Peer, Transport};

/// Which training protocol a session runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Salient,
    FedAvg,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Salient => write!(f, "salient"),
            Protocol::FedAvg => write!(f, "fedavg"),
        }
    }
}

/// Gradient wire layout for the salient protocol. `ValuesOnly` drops the
/// index column after the first exchange; the static mask implies it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireMode {
    Full,
    ValuesOnly,
}

/// Static per-session knobs shared by the server and every client.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub arch: Architecture,
    pub n_clients: u32,
    pub sparsity: f64,
    pub saliency_batches: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub wire: WireMode,
}

/// One client's local train/val/test shards. The validation split is held
/// for tuning and never touched by the protocol.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

/// Local state of one client site.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u32,
    pub params: ParamVector,
    pub mask: Option<GlobalMask>,
    pub data: ClientData,
    /// Base seed of this client's private random streams.
    pub seed: u64,
}

/// Server-side reference state. The reference parameters receive exactly
/// the same updates as every client, which keeps checkpointing and
/// synchrony checks trivial.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ParamVector,
    pub mask: Option<GlobalMask>,
    pub n_clients: u32,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Per-client accuracies on held-out test shards plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub per_client_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

/// Record of one synchronized round.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Server-side wall time from first receive-wait to last send-complete.
    pub comm_seconds: f64,
    /// Server-side wall time from first receive-wait to last gradient in.
    pub gather_seconds: f64,
    pub eval: Option<EvalMetrics>,
}

/// A fully set-up training session: server reference, client states, and
/// the transport joining them.
pub struct Session<'t> {
    transport: &'t dyn Transport,
    cfg: SessionConfig,
    server: ServerState,
    clients: Vec<ClientState>,
    manifest: Arc<Manifest>,
    steps_per_epoch: usize,
    rounds_done: usize,
}

/// Stepped learning-rate schedule: base rate for the first half of the
/// epochs, one decade down for the next quarter, two decades down after.
pub fn lr_at(base_lr: f64, epoch: u32, total_epochs: u32) -> f64 {
    let (e, t) = (epoch as u64, total_epochs as u64);
    if 4 * e >= 3 * t {
        base_lr * 0.01
    } else if 2 * e >= t {
        base_lr * 0.1
    } else {
        base_lr
    }
}

/// The minibatch a client draws at a given global round: a fresh
/// deterministic shuffle of its train shard each epoch, consumed in
/// `batch_size` chunks, remainder dropped.
pub fn training_batch(
    train: &Batch,
    client_seed: u64,
    steps_per_epoch: usize,
    batch_size: usize,
    round: usize,
) -> Result<Batch> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let epoch = (round / steps_per_epoch) as u64;
    let step = round % steps_per_epoch;
    let mut idx: Vec<usize> = (0..train.rows()).collect();
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(client_seed, &[TAG_SHUFFLE, epoch]));
    idx.shuffle(&mut rng);
    train.select(&idx[step * batch_size..(step + 1) * batch_size])
}

/// The minibatches a client feeds to saliency scoring: an independent
/// shuffled stream over the train shard, cycling if it is shorter than
/// `count × batch_size`. Separate from the training stream so the batch
/// schedule is identical with and without a mask phase.
pub fn saliency_batches(
    train: &Batch,
    client_seed: u64,
    count: u32,
    batch_size: usize,
) -> Result<Vec<Batch>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..train.rows()).collect();
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(client_seed, &[TAG_SALIENCY]));
    idx.shuffle(&mut rng);
    (0..count as usize)
        .map(|b| {
            let rows: Vec<usize> = (0..batch_size)
                .map(|r| idx[(b * batch_size + r) % idx.len()])
                .collect();
            train.select(&rows)
        })
        .collect()
}

fn expect_type(frame: &Frame, expected: MsgType) -> Result<()> {
    if frame.payload.is_empty() {
        return Err(Error::Transport("peer aborted (empty frame)".into()));
    }
    if frame.msg_type != expected {
        return Err(Error::Protocol(format!(
            "expected {expected:?} message, got {:?}",
            frame.msg_type
        )));
    }
    Ok(())
}

/// Initializes the server model, broadcasts it, and verifies every client
/// echoes the broadcast's content hash before any training state is built.
pub fn setup_session<'t>(
    cfg: SessionConfig,
    data: Vec<ClientData>,
    transport: &'t dyn Transport,
) -> Result<Session<'t>> {
    cfg.arch.validate()?;
    if cfg.n_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if data.len() != cfg.n_clients as usize {
        return Err(Error::Config(format!(
            "{} client datasets for {} clients",
            data.len(),
            cfg.n_clients
        )));
    }
    if transport.n_clients() != cfg.n_clients {
        return Err(Error::Config("transport sized for a different roster".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.sparsity) {
        return Err(Error::SparsityOutOfRange(cfg.sparsity));
    }
    for (i, d) in data.iter().enumerate() {
        for (name, split) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
            if split.input_dim() != cfg.arch.input_dim {
                return Err(Error::Config(format!(
                    "client {i} {name} split has input dim {}, arch wants {}",
                    split.input_dim(),
                    cfg.arch.input_dim
                )));
            }
            if let Some(&y) = split.labels().iter().find(|&&y| y as usize >= cfg.arch.classes) {
                return Err(Error::Config(format!(
                    "client {i} {name} split has label {y} outside {} classes",
                    cfg.arch.classes
                )));
            }
        }
    }
    let min_train = data.iter().map(|d| d.train.rows()).min().expect("n >= 1");
    let steps_per_epoch = min_train / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch_size {} exceeds smallest client train split {min_train}",
            cfg.batch_size
        )));
    }

    let params = nn::init_model(&cfg.arch, cfg.seed)?;
    let manifest = params.manifest_arc();
    let payload = codec::encode_dense(params.values());
    let expected_hash = sha256(&payload);

    let received: Vec<Result<ParamVector>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.n_clients)
            .map(|i| {
                let manifest = Arc::clone(&manifest);
                s.spawn(move || -> Result<ParamVector> {
                    let me = Peer::Client(i);
                    let frame = transport.recv(me, Peer::Server)?;
                    expect_type(&frame, MsgType::Params)?;
                    let ack = sha256(&frame.payload);
                    transport.send(me, Peer::Server, Frame::new(MsgType::HashAck, ack.to_vec()))?;
                    let values = codec::decode_dense(&frame.payload)?;
                    ParamVector::new(values, manifest)
                })
            })
            .collect();
        let server_res: Result<()> = (|| {
            for i in 0..cfg.n_clients {
                transport.send(
                    Peer::Server,
                    Peer::Client(i),
                    Frame::new(MsgType::Params, payload.clone()),
                )?;
            }
            for i in 0..cfg.n_clients {
                let ack = transport.recv(Peer::Server, Peer::Client(i))?;
                expect_type(&ack, MsgType::HashAck)?;
                if ack.payload != expected_hash {
                    return Err(Error::InitVerification { client: i });
                }
            }
            Ok(())
        })();
        let received: Vec<Result<ParamVector>> = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("client worker panicked".into()))))
            .collect();
        server_res.map(|()| received)
    })?;

    let mut clients = Vec::with_capacity(cfg.n_clients as usize);
    for (i, (params_res, d)) in received.into_iter().zip(data).enumerate() {
        clients.push(ClientState {
            client_id: i as u32,
            params: params_res?,
            mask: None,
            data: d,
            seed: derive_seed(cfg.seed, &[TAG_CLIENT, i as u64]),
        });
    }
    let counters = transport.counters();
    let server = ServerState {
        params,
        mask: None,
        n_clients: cfg.n_clients,
        bytes_up: counters.up,
        bytes_down: counters.down,
    };
    log::info!(
        "session ready: {} clients, d={}, {} steps/epoch",
        cfg.n_clients,
        server.params.len(),
        steps_per_epoch
    );
    Ok(Session {
        transport,
        cfg,
        server,
        clients,
        manifest,
        steps_per_epoch,
        rounds_done: 0,
    })
}

impl<'t> Session<'t> {
    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn mask(&self) -> Option<&GlobalMask> {
        self.server.mask.as_ref()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    /// Errors unless all client parameter vectors and the server reference
    /// are bitwise identical.
    pub fn verify_synchrony(&self) -> Result<()> {
        let reference = self.server.params.values();
        for c in &self.clients {
            if c.params.values() != reference {
                return Err(Error::Protocol(format!(
                    "client {} diverged from the server reference",
                    c.client_id
                )));
            }
        }
        Ok(())
    }

    fn refresh_server_counters(&mut self) {
        let counters = self.transport.counters();
        self.server.bytes_up = counters.up;
        self.server.bytes_down = counters.down;
    }

    /// One-time mask negotiation: clients send saliency scores up, the
    /// server aggregates in ascending client-id order, ranks globally, and
    /// broadcasts the resulting mask.
    pub fn mask_phase(&mut self) -> Result<&GlobalMask> {
        if self.server.mask.is_some() {
            return Err(Error::Protocol("mask phase already ran for this session".into()));
        }
        let transport = self.transport;
        let cfg = &self.cfg;
        let manifest = &self.manifest;
        let n = cfg.n_clients;

        let (mask_res, client_errors) = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .clients
                .iter_mut()
                .map(|c| {
                    s.spawn(move || -> Result<()> {
                        let me = Peer::Client(c.client_id);
                        let batches = saliency_batches(
                            &c.data.train,
                            c.seed,
                            cfg.saliency_batches,
                            cfg.batch_size,
                        )?;
                        let scores = match saliency::compute_saliency(&c.params, &cfg.arch, &batches)
                        {
                            Ok(sc) => sc,
                            Err(e) => {
                                let _ = transport.send(me, Peer::Server, Frame::new(MsgType::Scores, vec![]));
                                return Err(e);
                            }
                        };
                        transport.send(
                            me,
                            Peer::Server,
                            Frame::new(MsgType::Scores, scores.to_bytes()),
                        )?;
                        let frame = transport.recv(me, Peer::Server)?;
                        expect_type(&frame, MsgType::Mask)?;
                        c.mask = Some(GlobalMask::from_bytes(&frame.payload, c.params.manifest())?);
                        Ok(())
                    })
                })
                .collect();

            let mask_res: Result<GlobalMask> = (|| {
                let mut all_scores = Vec::with_capacity(n as usize);
                for i in 0..n {
                    let frame = transport.recv(Peer::Server, Peer::Client(i))?;
                    expect_type(&frame, MsgType::Scores)?;
                    all_scores.push(SaliencyScores::from_bytes(&frame.payload)?);
                }
                let global = masking::aggregate_scores(&all_scores)?;
                let mask = masking::topk_mask(&global, manifest, cfg.sparsity)?;
                let payload = mask.to_bytes();
                for i in 0..n {
                    transport.send(Peer::Server, Peer::Client(i), Frame::new(MsgType::Mask, payload.clone()))?;
                }
                Ok(mask)
            })();
            if mask_res.is_err() {
                // unblock any clients still waiting on the mask
                for i in 0..n {
                    let _ = transport.send(Peer::Server, Peer::Client(i), Frame::new(MsgType::Mask, vec![]));
                }
            }
            let client_errors: Vec<Result<()>> = handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("client worker panicked".into()))))
                .collect();
            (mask_res, client_errors)
        });
        let mask = mask_res?;
        for r in client_errors {
            r?;
        }
        log::info!(
            "mask phase done: {} of {} maskable parameters active ({} total active)",
            (mask.density() * self.manifest.maskable_count() as f64).round(),
            self.manifest.maskable_count(),
            mask.active_count()
        );
        self.server.mask = Some(mask);
        self.refresh_server_counters();
        Ok(self.server.mask.as_ref().expect("just set"))
    }

    /// One synchronized sparse round: mask, encode, gather, average in
    /// ascending client-id order, broadcast, and apply the identical update
    /// everywhere (server reference included).
    pub fn training_round_salient(&mut self, lr: f64) -> Result<RoundMetrics> {
        if self.server.mask.is_none() {
            return Err(Error::Protocol("mask phase must run before salient rounds".into()));
        }
        self.run_round(lr, Protocol::Salient)
    }

    /// One synchronized dense round: the FedAvg baseline, identical flow
    /// with dense gradient payloads and no masking.
    pub fn training_round_fedavg(&mut self, lr: f64) -> Result<RoundMetrics> {
        self.run_round(lr, Protocol::FedAvg)
    }

    fn run_round(&mut self, lr: f64, protocol: Protocol) -> Result<RoundMetrics> {
        let transport = self.transport;
        let cfg = &self.cfg;
        let round = self.rounds_done;
        let steps_per_epoch = self.steps_per_epoch;
        let before = transport.counters();
        let n = cfg.n_clients;
        let d = self.server.params.len();
        let server = &mut self.server;
        let clients = &mut self.clients;

        struct ServerOut {
            agg_payload: Vec<u8>,
            gather_seconds: f64,
            comm_seconds: f64,
        }

        let (server_out, client_results) = std::thread::scope(|s| {
            let handles: Vec<_> = clients
                .iter_mut()
                .map(|c| {
                    s.spawn(move || -> Result<f64> {
                        client_round(c, transport, cfg, protocol, round, steps_per_epoch, lr)
                    })
                })
                .collect();

            let grad_type = match protocol {
                Protocol::Salient => MsgType::SparseGrad,
                Protocol::FedAvg => MsgType::DenseGrad,
            };
            let server_mask = server.mask.as_ref();
            let server_res: Result<ServerOut> = (|| {
                let t0 = Instant::now();
                let mut frames = Vec::with_capacity(n as usize);
                for i in 0..n {
                    let frame = transport.recv(Peer::Server, Peer::Client(i))?;
                    expect_type(&frame, grad_type)?;
                    frames.push(frame);
                }
                let gather_seconds = t0.elapsed().as_secs_f64();
                let agg_payload = match protocol {
                    Protocol::Salient => {
                        aggregate_sparse(&frames, server_mask.expect("mask checked"), cfg, round)?
                    }
                    Protocol::FedAvg => aggregate_dense(&frames, d)?,
                };
                for i in 0..n {
                    transport.send(Peer::Server, Peer::Client(i), Frame::new(grad_type, agg_payload.clone()))?;
                }
                let comm_seconds = t0.elapsed().as_secs_f64();
                Ok(ServerOut {
                    agg_payload,
                    gather_seconds,
                    comm_seconds,
                })
            })();
            if server_res.is_err() {
                for i in 0..n {
                    let _ = transport.send(Peer::Server, Peer::Client(i), Frame::new(grad_type, vec![]));
                }
            }
            let client_results: Vec<Result<f64>> = handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("client worker panicked".into()))))
                .collect();
            (server_res, client_results)
        });

        let server_out = server_out?;
        let mut losses = Vec::with_capacity(n as usize);
        for r in client_results {
            losses.push(r?);
        }

        // the server reference takes exactly the update the clients decoded
        let agg = decode_agg_payload(&server_out.agg_payload, protocol, cfg, round, server.mask.as_ref())?;
        server.params = nn::apply_update(&server.params, &agg, lr)?;

        self.rounds_done += 1;
        self.refresh_server_counters();
        let after = transport.counters();
        Ok(RoundMetrics {
            round,
            epoch: (round / steps_per_epoch) as u32,
            lr,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            bytes_up: after.up - before.up,
            bytes_down: after.down - before.down,
            comm_seconds: server_out.comm_seconds,
            gather_seconds: server_out.gather_seconds,
            eval: None,
        })
    }

    /// Evaluates the current model on every client's held-out test shard.
    pub fn evaluate(&self) -> Result<EvalMetrics> {
        let mut per_client_accuracy = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let (_, acc) = nn::forward_loss(&c.params, &self.cfg.arch, &c.data.test)?;
            per_client_accuracy.push(acc);
        }
        let mean_accuracy =
            per_client_accuracy.iter().sum::<f64>() / per_client_accuracy.len() as f64;
        Ok(EvalMetrics {
            per_client_accuracy,
            mean_accuracy,
        })
    }

    /// Runs `epochs` of synchronized rounds under the stepped learning-rate
    /// schedule, evaluating every client at each epoch boundary. `on_round`
    /// sees every record as soon as its round completes.
    pub fn run_training(
        &mut self,
        epochs: u32,
        base_lr: f64,
        protocol: Protocol,
        mut on_round: impl FnMut(&RoundMetrics) -> Result<()>,
    ) -> Result<Vec<RoundMetrics>> {
        if protocol == Protocol::Salient && self.server.mask.is_none() {
            return Err(Error::Protocol("mask phase must run before salient training".into()));
        }
        let mut out = Vec::with_capacity(epochs as usize * self.steps_per_epoch);
        for epoch in 0..epochs {
            let lr = lr_at(base_lr, epoch, epochs);
            for step in 0..self.steps_per_epoch {
                let mut metrics = match protocol {
                    Protocol::Salient => self.training_round_salient(lr)?,
                    Protocol::FedAvg => self.training_round_fedavg(lr)?,
                };
                if step + 1 == self.steps_per_epoch {
                    metrics.eval = Some(self.evaluate()?);
                }
                on_round(&metrics)?;
                out.push(metrics);
            }
            if let Some(eval) = out.last().and_then(|m| m.eval.as_ref()) {
                log::info!(
                    "epoch {epoch}: lr={lr} loss={:.4} mean_test_acc={:.4}",
                    out.last().expect("pushed").train_loss,
                    eval.mean_accuracy
                );
            }
        }
        Ok(out)
    }
}

fn client_round(
    c: &mut ClientState,
    transport: &dyn Transport,
    cfg: &SessionConfig,
    protocol: Protocol,
    round: usize,
    steps_per_epoch: usize,
    lr: f64,
) -> Result<f64> {
    let me = Peer::Client(c.client_id);
    let grad_type = match protocol {
        Protocol::Salient => MsgType::SparseGrad,
        Protocol::FedAvg => MsgType::DenseGrad,
    };
    let compute = |c: &ClientState| -> Result<(f64, Vec<u8>)> {
        let batch = training_batch(&c.data.train, c.seed, steps_per_epoch, cfg.batch_size, round)?;
        let (loss, _acc, grad) = nn::forward_backward(&c.params, &cfg.arch, &batch)?;
        let payload = match protocol {
            Protocol::Salient => {
                let mask = c
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::Protocol("client has no mask".into()))?;
                let masked = masking::mask_grad(&grad, mask)?;
                let sparse = codec::encode(&masked, mask)?;
                if use_values_only(cfg, round) {
                    sparse.to_values_only_bytes()
                } else {
                    sparse.to_bytes()
                }
            }
            Protocol::FedAvg => codec::encode_dense(grad.values()),
        };
        Ok((loss, payload))
    };
    let (loss, payload) = match compute(c) {
        Ok(x) => x,
        Err(e) => {
            // unblock the server's gather before surfacing the error
            let _ = transport.send(me, Peer::Server, Frame::new(grad_type, vec![]));
            return Err(e);
        }
    };
    transport.send(me, Peer::Server, Frame::new(grad_type, payload))?;
    let frame = transport.recv(me, Peer::Server)?;
    expect_type(&frame, grad_type)?;
    let agg = decode_agg_payload(&frame.payload, protocol, cfg, round, c.mask.as_ref())?;
    c.params = nn::apply_update(&c.params, &agg, lr)?;
    Ok(loss)
}

fn use_values_only(cfg: &SessionConfig, round: usize) -> bool {
    cfg.wire == WireMode::ValuesOnly && round > 0
}

fn decode_sparse_payload(
    payload: &[u8],
    cfg: &SessionConfig,
    round: usize,
    mask: &GlobalMask,
) -> Result<GradVector> {
    let sparse = if use_values_only(cfg, round) {
        SparseGrad::from_values_only_bytes(payload, mask)?
    } else {
        let sg = SparseGrad::from_bytes(payload)?;
        if sg.indices() != mask.active_indices() {
            return Err(Error::Protocol("sparse gradient indices do not match the session mask".into()));
        }
        sg
    };
    Ok(codec::decode(&sparse))
}

fn decode_agg_payload(
    payload: &[u8],
    protocol: Protocol,
    cfg: &SessionConfig,
    round: usize,
    mask: Option<&GlobalMask>,
) -> Result<GradVector> {
    match protocol {
        Protocol::Salient => {
            let mask = mask.ok_or_else(|| Error::Protocol("no mask for sparse payload".into()))?;
            decode_sparse_payload(payload, cfg, round, mask)
        }
        Protocol::FedAvg => Ok(GradVector::from_values(codec::decode_dense(payload)?)),
    }
}

/// Averages sparse client gradients over the fixed active-index layout, in
/// the order the frames were gathered (ascending client id).
fn aggregate_sparse(
    frames: &[Frame],
    mask: &GlobalMask,
    cfg: &SessionConfig,
    round: usize,
) -> Result<Vec<u8>> {
    let active = mask.active_indices();
    let mut acc = vec![0.0f64; active.len()];
    for frame in frames {
        let sparse = if use_values_only(cfg, round) {
            SparseGrad::from_values_only_bytes(&frame.payload, mask)?
        } else {
            let sg = SparseGrad::from_bytes(&frame.payload)?;
            if sg.indices() != active {
                return Err(Error::Protocol(
                    "client sparse gradient does not cover the session mask".into(),
                ));
            }
            sg
        };
        for (a, &v) in acc.iter_mut().zip(sparse.values()) {
            *a += v as f64;
        }
    }
    let n = frames.len() as f64;
    let mut values = Vec::with_capacity(acc.len());
    for a in acc {
        let v = (a / n) as f32;
        if !v.is_finite() {
            return Err(Error::NonFinite("aggregated gradient"));
        }
        values.push(v);
    }
    let agg = SparseGrad::new(active.to_vec(), values, mask.len() as u32)?;
    Ok(if use_values_only(cfg, round) {
        agg.to_values_only_bytes()
    } else {
        agg.to_bytes()
    })
}

/// Averages dense client gradients coordinatewise, ascending client id.
fn aggregate_dense(frames: &[Frame], d: usize) -> Result<Vec<u8>> {
    let mut acc = vec![0.0f64; d];
    for frame in frames {
        let values = codec::decode_dense(&frame.payload)?;
        if values.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                got: values.len(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(&values) {
            *a += v as f64;
        }
    }
    let n = frames.len() as f64;
    let mut values = Vec::with_capacity(d);
    for a in acc {
        let v = (a / n) as f32;
        if !v.is_finite() {
            return Err(Error::NonFinite("aggregated gradient"));
        }
        values.push(v);
    }
    Ok(codec::encode_dense(&values))
}
