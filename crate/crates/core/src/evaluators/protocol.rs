//! Line-delimited JSON messages spoken between the optimizer and an
//! external evaluator process.
//!
//! The evaluator opens with `hello`, answers each `evaluate` request with
//! a `result` or `error` carrying the same `id`, and exits on `shutdown`.
//! Unknown fields are ignored on both sides.

use serde::{Deserialize, Serialize};

use crate::budget::PositionPolicy;

/// Messages written by the evaluator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EvaluatorMessage {
    Hello {
        layers: usize,
        metric: String,
        max_concurrency: usize,
        deterministic: bool,
    },
    Result {
        id: u64,
        score: f64,
    },
    Error {
        id: u64,
        message: String,
    },
}

/// Messages written by the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Evaluate {
        id: u64,
        budgets: Vec<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        policy: Option<PositionPolicy>,
    },
    Shutdown,
}

/// Serializes `msg` as one newline-terminated line.
pub fn to_line<T: Serialize>(msg: &T) -> serde_json::Result<String> {
    let mut line = serde_json::to_string(msg)?;
    line.push('\n');
    Ok(line)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wire_shapes() {
        let hello = EvaluatorMessage::Hello {
            layers: 32,
            metric: "f1".into(),
            max_concurrency: 1,
            deterministic: true,
        };
        assert_eq!(
            to_line(&hello).unwrap(),
            "{\"type\":\"hello\",\"layers\":32,\"metric\":\"f1\",\"max_concurrency\":1,\"deterministic\":true}\n"
        );
        let req = ClientMessage::Evaluate {
            id: 7,
            budgets: vec![1, 2],
            policy: None,
        };
        assert_eq!(
            to_line(&req).unwrap(),
            "{\"type\":\"evaluate\",\"id\":7,\"budgets\":[1,2]}\n"
        );
        let with_policy = ClientMessage::Evaluate {
            id: 8,
            budgets: vec![3],
            policy: Some(PositionPolicy::FixedPosition { sink_tokens: 2 }),
        };
        assert_eq!(
            to_line(&with_policy).unwrap(),
            "{\"type\":\"evaluate\",\"id\":8,\"budgets\":[3],\"policy\":{\"kind\":\"fixed_position\",\"sink_tokens\":2}}\n"
        );
        assert_eq!(to_line(&ClientMessage::Shutdown).unwrap(), "{\"type\":\"shutdown\"}\n");
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let msg: EvaluatorMessage =
            serde_json::from_str(r#"{"type":"result","id":3,"score":0.5,"elapsed_ms":120}"#).unwrap();
        assert_eq!(msg, EvaluatorMessage::Result { id: 3, score: 0.5 });
        let msg: ClientMessage =
            serde_json::from_str(r#"{"type":"evaluate","id":1,"budgets":[4],"trace":true}"#).unwrap();
        assert_eq!(
            msg,
            ClientMessage::Evaluate {
                id: 1,
                budgets: vec![4],
                policy: None
            }
        );
    }

    fn evaluator_message() -> impl Strategy<Value = EvaluatorMessage> {
        prop_oneof![
            (0usize..512, "[a-z_]{0,12}", 1usize..64, any::<bool>()).prop_map(
                |(layers, metric, max_concurrency, deterministic)| {
                    EvaluatorMessage::Hello {
                        layers,
                        metric,
                        max_concurrency,
                        deterministic,
                    }
                }
            ),
            (any::<u64>(), -1e12f64..1e12).prop_map(|(id, score)| EvaluatorMessage::Result { id, score }),
            (any::<u64>(), ".{0,40}").prop_map(|(id, message)| EvaluatorMessage::Error { id, message }),
        ]
    }

    fn client_message() -> impl Strategy<Value = ClientMessage> {
        prop_oneof![
            (
                any::<u64>(),
                proptest::collection::vec(any::<u32>(), 0..64),
                proptest::option::of(any::<u32>())
            )
                .prop_map(|(id, budgets, sink)| ClientMessage::Evaluate {
                    id,
                    budgets,
                    policy: sink.map(|sink_tokens| PositionPolicy::FixedPosition { sink_tokens }),
                }),
            Just(ClientMessage::Shutdown),
        ]
    }

    proptest! {
        #[test]
        fn evaluator_messages_round_trip(msg in evaluator_message()) {
            let line = to_line(&msg).unwrap();
            prop_assert!(line.ends_with('\n') && !line[..line.len() - 1].contains('\n'));
            prop_assert_eq!(serde_json::from_str::<EvaluatorMessage>(&line).unwrap(), msg);
        }

        #[test]
        fn client_messages_round_trip(msg in client_message()) {
            let line = to_line(&msg).unwrap();
            prop_assert!(line.ends_with('\n') && !line[..line.len() - 1].contains('\n'));
            prop_assert_eq!(serde_json::from_str::<ClientMessage>(&line).unwrap(), msg);
        }
    }
}
