use specleak::harness::{EngineSpec, ExperimentConfig, Workbench};
use specleak::lm::{SamplerConfig, Vocab};
use specleak::observer::{
    capture, estimate_token_counts, featurize, mean_size_difference, pearson, read_traces_csv,
    write_traces_csv, ObserverError, Sample, Trace, VocabStats,
};
use specleak::stream::{queue_link, serve, Framer, MitigationPolicy, SessionConfig, SessionLog};

fn trace(sizes: &[u32]) -> Trace {
    Trace {
        samples: sizes
            .iter()
            .enumerate()
            .map(|(i, &size)| Sample {
                inter_arrival: 0.5 + i as f64,
                size,
            })
            .collect(),
        label: None,
        complete: true,
    }
}

fn served(prompt_index: usize) -> (Workbench, SessionLog, Trace) {
    let wb = Workbench::new(ExperimentConfig::default()).unwrap();
    let engine = wb.engine(&EngineSpec::default()).unwrap();
    let prompt = wb
        .tokenize(wb.assets.prompts_general()[prompt_index])
        .unwrap();
    let cfg = SessionConfig {
        engine,
        prompt,
        max_tokens: 64,
        sampler: SamplerConfig::greedy(),
        policy: MitigationPolicy::none(),
        framer: Framer::default(),
    };
    let (mut sink, mut tap) = queue_link();
    let log = serve(&cfg, &mut sink).unwrap();
    drop(sink);
    let trace = capture(&mut tap).unwrap();
    (wb, log, trace)
}

#[test]
fn captured_trace_equals_the_server_side_view() {
    let (_, log, captured) = served(7);
    assert_eq!(captured, Trace::from_packets(&log.packets));
    assert!(captured.samples.iter().all(|s| s.inter_arrival == 1.0));
}

#[test]
fn features_truncate_and_zero_pad() {
    let (_, log, t) = served(1);
    let sizes: Vec<f64> = log.packet_sizes().iter().map(|&s| s as f64).collect();
    assert!(featurize(&t, 0).values.is_empty());
    assert_eq!(featurize(&t, 3).values, sizes[..3]);
    let long = featurize(&t, 300).values;
    assert_eq!(long.len(), 300);
    assert_eq!(long[..sizes.len()], sizes[..]);
    assert!(long[sizes.len()..].iter().all(|&v| v == 0.0));
}

#[test]
fn csv_round_trip_keeps_labels_order_and_empty_traces() {
    let traces = vec![
        ("b".to_owned(), trace(&[3, 9, 27]).with_label("q01")),
        ("a".to_owned(), trace(&[])),
        ("c".to_owned(), trace(&[1024; 5]).with_label("with,comma")),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traces.csv");
    write_traces_csv(std::fs::File::create(&path).unwrap(), &traces).unwrap();
    let back = read_traces_csv(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, traces);
}

#[test]
fn malformed_csv_rows_are_rejected() {
    let header = "trace_id,label,seq,inter_arrival,size\n";
    for body in ["t,,1,1.0,5\n", "t,,0,1.0,-5\n", "t,,0,soon,5\n"] {
        let err = read_traces_csv(format!("{header}{body}").as_bytes()).unwrap_err();
        assert!(
            matches!(err, ObserverError::BadRow { ref trace_id, .. } if trace_id == "t"),
            "{body}: {err}"
        );
    }
}

#[test]
fn pearson_matches_hand_computed_values() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    // deviations (-2,-1,0,1,2) and (-1,-2,1,0,2): 8 / sqrt(10 * 10)
    assert!((pearson(&x, &[2.0, 1.0, 4.0, 3.0, 5.0]) - 0.8).abs() < 1e-12);
    assert!((pearson(&x, &[10.0, 8.0, 6.0, 4.0, 2.0]) + 1.0).abs() < 1e-12);
    assert!(pearson(&x, &[1.0; 5]).is_nan());
    assert!(pearson(&[1.0], &[1.0]).is_nan());
}

#[test]
fn token_count_estimates_follow_raw_sizes() {
    let (wb, log, t) = served(2);
    let vocab = wb.model.vocab();
    let stats = VocabStats::from_corpus(vocab, [log.output().as_slice()], 1);
    let est = estimate_token_counts(&t, stats, true);
    assert!(est.reliable);
    let truth: Vec<f64> = log.token_counts().iter().map(|&c| c as f64).collect();
    let guess: Vec<f64> = est.counts.iter().map(|&c| c as f64).collect();
    assert!(pearson(&truth, &guess) > 0.8, "{truth:?} vs {guess:?}");
    assert!(!estimate_token_counts(&t, stats, false).reliable);
}

#[test]
fn vocab_stats_count_one_separator_per_token() {
    let mut v = Vocab::new();
    let a = v.insert("a");
    let bbb = v.insert("bbb");
    let stats = VocabStats::from_corpus(&v, [[a, bbb].as_slice(), [bbb].as_slice()], 1);
    assert!((stats.mean_token_bytes - (2.0 + 4.0 + 4.0) / 3.0).abs() < 1e-12);
}

#[test]
fn size_difference_counts_missing_packets_as_empty() {
    assert_eq!(mean_size_difference(&trace(&[]), &trace(&[])), 0.0);
    assert_eq!(mean_size_difference(&trace(&[4, 6]), &trace(&[4])), 3.0);
    assert_eq!(
        mean_size_difference(&trace(&[1, 2, 3]), &trace(&[3, 2, 1])),
        4.0 / 3.0
    );
}
