use std::io::{self, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

use specleak::harness::{EngineSpec, ExperimentConfig, Workbench};
use specleak::lm::SamplerConfig;
use specleak::observer::capture;
use specleak::specdec::Engine;
use specleak::stream::{
    apply_mitigation, overhead, queue_link, run_session, serve, Framer, MitigationPolicy, Packet,
    PacketSink, SessionConfig, StreamError, StreamTap, TcpSink,
};

fn workbench() -> (Workbench, Engine) {
    let wb = Workbench::new(ExperimentConfig::default()).unwrap();
    let engine = wb.engine(&EngineSpec::default()).unwrap();
    (wb, engine)
}

fn session(
    wb: &Workbench,
    engine: &Engine,
    prompt: &str,
    policy: MitigationPolicy,
) -> SessionConfig {
    SessionConfig {
        engine: engine.clone(),
        prompt: wb.tokenize(prompt).unwrap(),
        max_tokens: 64,
        sampler: SamplerConfig::greedy(),
        policy,
        framer: Framer::default(),
    }
}

fn raw(sizes: &[usize]) -> Vec<Packet> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| Packet {
            seq: i as u64,
            payload_len: s,
            pad_len: 0,
            sent_at: i as u64 + 1,
            iterations: 1,
            text: "z".repeat(s),
        })
        .collect()
}

fn sizes(ps: &[Packet]) -> Vec<usize> {
    ps.iter().map(Packet::observable_size).collect()
}

#[test]
fn tcp_and_queue_observers_agree_with_the_server_log() {
    let (wb, engine) = workbench();
    let assets = wb.assets.clone();
    let prompt = assets.prompts_general()[3];
    for policy in [MitigationPolicy::none(), MitigationPolicy::aggregate(2)] {
        let cfg = session(&wb, &engine, prompt, policy);

        let (mut sink, mut tap) = queue_link();
        let log = serve(&cfg, &mut sink).unwrap();
        drop(sink);
        let queued = capture(&mut tap).unwrap();

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server_cfg = cfg.clone();
        let server = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            serve(&server_cfg, &mut TcpSink::new(stream)).unwrap()
        });
        let tcp = capture(&mut StreamTap::new(TcpStream::connect(addr).unwrap())).unwrap();
        let tcp_log = server.join().unwrap();

        let expected: Vec<u32> = log.packet_sizes().iter().map(|&s| s as u32).collect();
        assert_eq!(queued.sizes(), expected);
        assert_eq!(tcp.sizes(), expected);
        assert!(queued.complete && tcp.complete);
        assert_eq!(tcp_log, log);
    }
}

#[test]
fn packet_payloads_are_rederivable_from_iterations() {
    let (wb, engine) = workbench();
    let vocab = wb.model.vocab();
    let assets = wb.assets.clone();
    for prompt in assets.prompts_general().iter().take(10) {
        let (log, packets) =
            run_session(&session(&wb, &engine, prompt, MitigationPolicy::none())).unwrap();
        assert_eq!(packets.len(), log.iterations.len());
        for (i, (it, p)) in log.iterations.iter().zip(&packets).enumerate() {
            let words: usize = it.tokens.iter().map(|&t| vocab.byte_len(t)).sum();
            // separators inside the iteration, plus a leading one after the first packet
            let seps = it.tokens.len() - 1 + usize::from(i > 0);
            assert_eq!(p.payload_len, words + seps);
            assert_eq!(p.pad_len, 0);
        }
        let text: String = packets.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(text, log.transcript(vocab));
    }
}

#[test]
fn mitigation_worked_examples() {
    let padded = apply_mitigation(&raw(&[5, 23, 9]), &MitigationPolicy::constant(1024)).unwrap();
    assert_eq!(sizes(&padded), vec![1024; 3]);
    assert!((overhead(&padded) - 3072.0 / 37.0).abs() < 1e-12);

    let merged = apply_mitigation(&raw(&[3, 4, 2, 5, 1]), &MitigationPolicy::aggregate(3)).unwrap();
    assert_eq!(sizes(&merged), vec![9, 6]);
    assert_eq!(
        merged.iter().map(|p| p.iterations).collect::<Vec<_>>(),
        vec![3, 2]
    );
    assert_eq!(merged[0].text.len(), 9);

    assert!(matches!(
        apply_mitigation(&raw(&[5, 2000]), &MitigationPolicy::constant(1024)),
        Err(StreamError::PayloadExceedsPad { seq: 1, .. })
    ));
    assert!(apply_mitigation(&raw(&[1]), &MitigationPolicy::aggregate(0)).is_err());
}

#[test]
fn variable_padding_is_uniform_and_content_blind() {
    let d = 7;
    let n = 16_000;
    let packets = raw(&vec![10; n]);
    let padded = apply_mitigation(&packets, &MitigationPolicy::variable(d, 11)).unwrap();
    let mut hist = vec![0usize; d + 1];
    for p in &padded {
        hist[p.pad_len] += 1;
    }
    // chi-square against Unif{0..=d}; 7 dof, p = 0.001 critical value 24.32
    let expected = n as f64 / (d + 1) as f64;
    let chi2: f64 = hist
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    assert!(chi2 < 24.32, "chi2 {chi2}, {hist:?}");

    let other = raw(&(0..n).map(|i| i % 40 + 1).collect::<Vec<_>>());
    let padded_other = apply_mitigation(&other, &MitigationPolicy::variable(d, 11)).unwrap();
    let pads = |ps: &[Packet]| ps.iter().map(|p| p.pad_len).collect::<Vec<_>>();
    assert_eq!(pads(&padded), pads(&padded_other));
}

#[test]
fn real_sessions_under_each_policy() {
    let (wb, engine) = workbench();
    let assets = wb.assets.clone();
    for prompt in assets.prompts_general().iter().take(8) {
        let (plain, _) =
            run_session(&session(&wb, &engine, prompt, MitigationPolicy::none())).unwrap();
        let iterations = plain.iterations.len();
        for k in 1..=5 {
            let (log, _) = run_session(&session(
                &wb,
                &engine,
                prompt,
                MitigationPolicy::aggregate(k),
            ))
            .unwrap();
            assert_eq!(log.packets.len(), iterations.div_ceil(k));
            assert_eq!(log.output(), plain.output());
        }
        let (log, packets) = run_session(&session(
            &wb,
            &engine,
            prompt,
            MitigationPolicy::constant(1024),
        ))
        .unwrap();
        assert!(log.packet_sizes().iter().all(|&s| s == 1024));
        assert!(overhead(&packets) > 50.0, "{}", overhead(&packets));
        assert!((log.overhead() - overhead(&packets)).abs() < 1e-12);
    }
}

struct FailAfter(usize);

impl PacketSink for FailAfter {
    fn send(&mut self, _payload: &[u8], _sent_at: u64) -> io::Result<()> {
        if self.0 == 0 {
            return Err(io::ErrorKind::BrokenPipe.into());
        }
        self.0 -= 1;
        Ok(())
    }
}

#[test]
fn transport_failure_keeps_the_partial_log() {
    let (wb, engine) = workbench();
    let cfg = session(
        &wb,
        &engine,
        wb.assets.prompts_general()[0],
        MitigationPolicy::none(),
    );
    match serve(&cfg, &mut FailAfter(2)) {
        Err(StreamError::Transport { log, .. }) => {
            assert!(!log.complete);
            assert_eq!(log.packets.len(), 2);
            assert!(log.iterations.len() > 2);
        }
        other => panic!("expected a transport error, got {other:?}"),
    }
}

#[test]
fn stream_cut_inside_a_frame_is_an_incomplete_trace() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let writer = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        s.write_all(&[0, 0, 0, 3, b'a', b'b', b'c']).unwrap();
        s.write_all(&[0, 0, 0, 9, b'x']).unwrap();
    });
    let trace = capture(&mut StreamTap::new(TcpStream::connect(addr).unwrap())).unwrap();
    writer.join().unwrap();
    assert_eq!(trace.sizes(), vec![3]);
    assert!(!trace.complete);
}
