//! End-to-end protocol behavior over both transports.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use salientgrads_core::nn::{Architecture, Batch};
use salientgrads_core::protocol::transport::{
    ByteCounters, Frame, InMemoryTransport, LogRecord, LoopbackTransport, MsgType, Peer, Transport,
};
use salientgrads_core::protocol::{
    setup_session, ClientData, Protocol, Session, SessionConfig, WireMode,
};
use salientgrads_core::{codec, Error};

fn blob_batch(arch: &Architecture, seed: u64, rows: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(rows * arch.input_dim);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let label = rng.random_range(0..arch.classes as u32);
        for f in 0..arch.input_dim {
            let center = if f % arch.classes == label as usize { 2.0 } else { 0.0 };
            inputs.push(center + rng.random_range(-0.5f32..0.5));
        }
        labels.push(label);
    }
    Batch::new(inputs, labels, arch.input_dim).unwrap()
}

fn client_data(arch: &Architecture, n: u32, rows: usize) -> Vec<ClientData> {
    (0..n)
        .map(|i| ClientData {
            train: blob_batch(arch, 100 + i as u64, rows),
            val: blob_batch(arch, 200 + i as u64, 8),
            test: blob_batch(arch, 300 + i as u64, 16),
        })
        .collect()
}

fn config(arch: Architecture, n: u32, sparsity: f64, wire: WireMode) -> SessionConfig {
    SessionConfig {
        arch,
        n_clients: n,
        sparsity,
        saliency_batches: 3,
        batch_size: 8,
        seed: 42,
        wire,
    }
}

fn run_session(transport: &dyn Transport, wire: WireMode) -> (Vec<LogRecord>, ByteCounters) {
    let arch = Architecture::mlp(&[8, 12, 4]).unwrap();
    let n = transport.n_clients();
    let cfg = config(arch.clone(), n, 0.8, wire);
    let data = client_data(&arch, n, 40);
    let mut session = setup_session(cfg, data, transport).unwrap();
    session.mask_phase().unwrap();
    let metrics = session
        .run_training(2, 0.1, Protocol::Salient, |_| Ok(()))
        .unwrap();
    assert_eq!(metrics.len(), 2 * session.steps_per_epoch());
    session.verify_synchrony().unwrap();
    assert!(metrics.iter().all(|m| m.train_loss.is_finite()));
    assert!(metrics.last().unwrap().eval.is_some());
    (transport.message_log(), transport.counters())
}

#[test]
fn salient_session_runs_over_memory_transport() {
    let transport = InMemoryTransport::new(3);
    let (log, counters) = run_session(&transport, WireMode::Full);
    assert_eq!(
        log.iter().filter(|r| r.msg_type == MsgType::Scores).count(),
        3
    );
    assert_eq!(log.iter().filter(|r| r.msg_type == MsgType::Mask).count(), 3);
    let logged: u64 = log.iter().map(|r| r.payload_len as u64).sum();
    assert_eq!(logged, counters.total());
}

#[test]
fn salient_session_runs_over_loopback_transport() {
    let transport = LoopbackTransport::connect(3).unwrap();
    let (log, counters) = run_session(&transport, WireMode::Full);
    assert!(log.iter().any(|r| r.msg_type == MsgType::SparseGrad));
    assert!(counters.total() > 0);
}

#[test]
fn values_only_wire_shrinks_rounds_after_the_first() {
    let transport = InMemoryTransport::new(2);
    let arch = Architecture::mlp(&[8, 12, 4]).unwrap();
    let cfg = config(arch.clone(), 2, 0.5, WireMode::ValuesOnly);
    let data = client_data(&arch, 2, 24);
    let mut session = setup_session(cfg, data, &transport).unwrap();
    let mask = session.mask_phase().unwrap().clone();
    let nnz = mask.active_count();
    let first = session.training_round_salient(0.1).unwrap();
    let second = session.training_round_salient(0.1).unwrap();
    // round 0 carries indices, later rounds do not
    assert_eq!(first.bytes_up, 2 * (12 + 8 * nnz as u64));
    assert_eq!(second.bytes_up, 2 * (12 + 4 * nnz as u64));
    assert_eq!(second.bytes_down, 2 * (12 + 4 * nnz as u64));
    session.verify_synchrony().unwrap();
}

#[test]
fn fedavg_runs_without_mask_phase_and_counts_dense_bytes() {
    let transport = InMemoryTransport::new(3);
    let arch = Architecture::mlp(&[8, 12, 4]).unwrap();
    let d = arch.param_count() as u64;
    let cfg = config(arch.clone(), 3, 0.9, WireMode::Full);
    let data = client_data(&arch, 3, 24);
    let mut session = setup_session(cfg, data, &transport).unwrap();
    let m = session.training_round_fedavg(0.1).unwrap();
    assert_eq!(m.bytes_up, 3 * (8 + 4 * d));
    assert_eq!(m.bytes_down, 3 * (8 + 4 * d));
    session.verify_synchrony().unwrap();
}

#[test]
fn salient_rounds_require_mask_phase() {
    let transport = InMemoryTransport::new(2);
    let arch = Architecture::mlp(&[8, 12, 4]).unwrap();
    let cfg = config(arch.clone(), 2, 0.5, WireMode::Full);
    let data = client_data(&arch, 2, 24);
    let mut session = setup_session(cfg, data, &transport).unwrap();
    assert!(matches!(
        session.training_round_salient(0.1),
        Err(Error::Protocol(_))
    ));
    session.mask_phase().unwrap();
    assert!(matches!(session.mask_phase(), Err(Error::Protocol(_))));
}

#[test]
fn setup_counts_broadcast_bytes_and_verifies_hashes() {
    let transport = InMemoryTransport::new(5);
    let arch = Architecture::mlp(&[8, 12, 4]).unwrap();
    let d = arch.param_count();
    let cfg = config(arch.clone(), 5, 0.5, WireMode::Full);
    let data = client_data(&arch, 5, 24);
    let session = setup_session(cfg, data, &transport).unwrap();
    let counters = transport.counters();
    assert_eq!(counters.down, 5 * codec::dense_payload_bytes(d) as u64);
    assert_eq!(counters.up, 5 * 32); // sha-256 acks
    session.verify_synchrony().unwrap();
}

/// Wrapper that flips one byte of the params payload destined for a chosen
/// client, to exercise init verification.
struct Corrupting<T: Transport> {
    inner: T,
    target: u32,
}

impl<T: Transport> Transport for Corrupting<T> {
    fn send(&self, from: Peer, to: Peer, mut frame: Frame) -> salientgrads_core::Result<()> {
        if to == Peer::Client(self.target) && frame.msg_type == MsgType::Params {
            let last = frame.payload.len() - 1;
            frame.payload[last] ^= 0x01;
        }
        self.inner.send(from, to, frame)
    }

    fn recv(&self, me: Peer, from: Peer) -> salientgrads_core::Result<Frame> {
        self.inner.recv(me, from)
    }

    fn counters(&self) -> ByteCounters {
        self.inner.counters()
    }

    fn message_log(&self) -> Vec<LogRecord> {
        self.inner.message_log()
    }

    fn n_clients(&self) -> u32 {
        self.inner.n_clients()
    }
}

#[test]
fn corrupted_broadcast_aborts_setup() {
    let transport = Corrupting {
        inner: InMemoryTransport::new(3),
        target: 1,
    };
    let arch = Architecture::mlp(&[8, 12, 4]).unwrap();
    let cfg = config(arch.clone(), 3, 0.5, WireMode::Full);
    let data = client_data(&arch, 3, 24);
    match setup_session(cfg, data, &transport) {
        Err(Error::InitVerification { client }) => assert_eq!(client, 1),
        Err(other) => panic!("expected init verification failure, got {other:?}"),
        Ok(_) => panic!("setup accepted a corrupted broadcast"),
    }
}

#[test]
fn zero_epochs_changes_nothing() {
    let transport = InMemoryTransport::new(2);
    let arch = Architecture::mlp(&[8, 12, 4]).unwrap();
    let cfg = config(arch.clone(), 2, 0.5, WireMode::Full);
    let data = client_data(&arch, 2, 24);
    let mut session = setup_session(cfg, data, &transport).unwrap();
    let theta0 = session.server().params.clone();
    let metrics = session
        .run_training(0, 0.1, Protocol::FedAvg, |_| Ok(()))
        .unwrap();
    assert!(metrics.is_empty());
    assert_eq!(session.server().params.values(), theta0.values());
}

#[test]
fn scores_use_fixed_saliency_stream_not_training_stream() {
    // identical sessions running different protocols draw identical batches
    let arch = Architecture::mlp(&[8, 12, 4]).unwrap();
    let mk = || {
        let t = InMemoryTransport::new(2);
        let cfg = config(arch.clone(), 2, 0.0, WireMode::Full);
        let data = client_data(&arch, 2, 24);
        (t, cfg, data)
    };
    let (t1, cfg1, data1) = mk();
    let mut salient = setup_session(cfg1, data1, &t1).unwrap();
    salient.mask_phase().unwrap();
    let (t2, cfg2, data2) = mk();
    let mut fedavg = setup_session(cfg2, data2, &t2).unwrap();
    for _ in 0..6 {
        salient.training_round_salient(0.1).unwrap();
        fedavg.training_round_fedavg(0.1).unwrap();
        assert_eq!(
            salient.server().params.values(),
            fedavg.server().params.values(),
            "sparsity-0 salient and fedavg must stay bitwise identical"
        );
    }
}

#[test]
fn session_uses_arc_manifest_consistently() {
    let transport = InMemoryTransport::new(1);
    let arch = Architecture::mlp(&[4, 6, 3]).unwrap();
    let cfg = config(arch.clone(), 1, 0.5, WireMode::Full);
    let data = client_data(&arch, 1, 16);
    let session = setup_session(cfg, data, &transport).unwrap();
    let m = Arc::new(arch.manifest());
    assert_eq!(session.server().params.manifest(), m.as_ref());
    let _: &Session = &session;
}
