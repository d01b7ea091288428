use chainforge::tools::ToolErrorKind;
use chainforge::trajectory::{
    build_mask, read_jsonl, write_jsonl, ByteTokenizer, Segment, SegmentKind, Termination, Tokenizer,
    ToolCallRecord, Trajectory, WhitespaceTokenizer,
};
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z ]{0,40}",
        "\\PC{0,24}",
        Just("Action: calculator\nInput: {\"expression\": \"1+1\"}".to_string()),
        Just("naïve café \u{1F600} \"quoted\" \\ back".to_string()),
    ]
}

fn termination() -> impl Strategy<Value = Termination> {
    prop_oneof![
        Just(Termination::Natural),
        Just(Termination::MaxTurns),
        Just(Termination::Error)
    ]
}

fn record() -> impl Strategy<Value = ToolCallRecord> {
    (
        0u32..8,
        "[a-z_]{1,12}",
        any::<bool>(),
        prop::option::of(prop_oneof![
            Just(ToolErrorKind::UnknownTool),
            Just(ToolErrorKind::BadArgs),
            Just(ToolErrorKind::Timeout),
            Just(ToolErrorKind::EnvError),
        ]),
        -1e6f64..1e6,
    )
        .prop_map(|(turn, name, valid, error, x)| ToolCallRecord {
            turn,
            name,
            args: serde_json::json!({ "x": x, "s": "v" }),
            valid,
            error,
        })
}

/// Valid trajectories: prompt, then alternating response/observation.
fn trajectory() -> impl Strategy<Value = Trajectory> {
    (
        "[a-z0-9-]{1,16}",
        0usize..64,
        text(),
        prop::collection::vec((text(), text()), 1..6),
        termination(),
        -10.0f64..10.0,
        prop::collection::vec(record(), 0..5),
        prop::collection::btree_map("[a-z_]{1,8}", -1e3f64..1e3, 0..4),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(
            |(
                id,
                group,
                prompt,
                turns,
                terminated,
                reward,
                tool_calls,
                metrics,
                whitespace,
                trailing_obs,
            )| {
                let tok: &dyn Tokenizer = if whitespace {
                    &WhitespaceTokenizer
                } else {
                    &ByteTokenizer
                };
                let mut t = Trajectory::new(id, group, Segment::encode(SegmentKind::Prompt, prompt, tok));
                let n = turns.len();
                for (i, (r, o)) in turns.into_iter().enumerate() {
                    t.segments.push(Segment::encode(SegmentKind::Response, r, tok));
                    let last = i + 1 == n;
                    if !last || (trailing_obs && terminated != Termination::Natural) {
                        t.segments.push(Segment::encode(SegmentKind::Observation, o, tok));
                    }
                }
                t.terminated = terminated;
                t.reward = reward;
                t.tool_calls = tool_calls;
                t.metrics = metrics;
                t
            },
        )
}

/// Position-by-position lookup of which segment covers each token.
fn resegment(t: &Trajectory) -> (Vec<u32>, Vec<u8>) {
    let total: usize = t.segments.iter().map(|s| s.tokens.len()).sum();
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for pos in 0..total {
        let mut start = 0;
        for s in &t.segments {
            if pos < start + s.tokens.len() {
                ids.push(s.tokens[pos - start]);
                mask.push(u8::from(s.kind == SegmentKind::Response));
                break;
            }
            start += s.tokens.len();
        }
    }
    (ids, mask)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn jsonl_round_trip(batch in prop::collection::vec(trajectory(), 1..4)) {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &batch).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &batch);
        let mut again = Vec::new();
        write_jsonl(&mut again, &back).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn mask_matches_resegmentation(t in trajectory()) {
        t.validate().unwrap();
        let row = build_mask(&t).unwrap();
        let (ids, mask) = resegment(&t);
        prop_assert_eq!(&row.token_ids, &ids);
        prop_assert_eq!(&row.mask, &mask);
        prop_assert_eq!(row.group_index, t.group);
        prop_assert_eq!(row.masked_count(), t.response_token_count());
        prop_assert_eq!(row.mask.len(), t.token_count());
    }

    #[test]
    fn truncation_keeps_structure(t in trajectory(), budget in 0usize..400) {
        let cut = t.truncate_oldest_turns(budget);
        prop_assert_eq!(&cut.segments[0], &t.segments[0]);
        prop_assert_eq!(cut.final_response(), t.final_response());
        prop_assert_eq!(cut.segments.last(), t.segments.last());
        prop_assert!(cut.token_count() <= budget || cut.turns() == 1);
        cut.validate().unwrap();
        // Kept segments are a suffix of the original after the prompt.
        let tail = &t.segments[t.segments.len() - (cut.segments.len() - 1)..];
        prop_assert_eq!(&cut.segments[1..], tail);
    }
}

#[test]
fn parse_errors_carry_line_numbers() {
    let good =
        Trajectory::new("a", 0, Segment::encode(SegmentKind::Prompt, "p", &ByteTokenizer)).to_json_line();
    let input = format!("{good}\n\n{{\"chain_id\": 3}}\n");
    let err = read_jsonl(input.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn invalid_structures_are_rejected() {
    let tok = ByteTokenizer;
    let mut t = Trajectory::new("a", 0, Segment::encode(SegmentKind::Prompt, "p", &tok));
    t.terminated = Termination::Natural;
    assert!(t.validate().is_err());
    t.segments
        .push(Segment::encode(SegmentKind::Observation, "o", &tok));
    assert!(build_mask(&t).is_err());
    t.segments[1] = Segment::encode(SegmentKind::Response, "r", &tok);
    t.segments
        .push(Segment::encode(SegmentKind::Observation, "o", &tok));
    assert!(t.validate().is_err(), "natural chains end with a response");
    t.terminated = Termination::MaxTurns;
    t.validate().unwrap();
    t.reward = f64::NAN;
    assert!(t.validate().is_err());
}
