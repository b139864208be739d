mod common;

use std::collections::VecDeque;
use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::HeaderMap;
use axum::routing::post;
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlchat::data::{Category, InstructionRecord, Turn};
use vlchat::eval::{score_remote, EvalOutcome, Restriction, Setting};
use vlchat::infer::*;
use vlchat::model::ImageInput;
use vlchat::text::{render_chat, ChatTurn, Special, Vocab};
use vlchat::train::{prepare_examples, run_stage, RunOptions, TrainPlan};
use vlchat::{Error, ModelBundle, StackConfig};

fn png_bytes(seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = image::RgbImage::from_fn(20, 14, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()]));
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    buf.into_inner()
}

fn random_prompt(bundle: &ModelBundle, rng: &mut ChaCha8Rng) -> (vlchat::text::TokenizedSample, Vec<ImageInput>) {
    let n_images = rng.gen_range(0..3);
    let len = rng.gen_range(1..30);
    let text: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
    let sample = render_chat(&bundle.vocab, &[ChatTurn::user(text, n_images)], 512, bundle.config.pool_latents).unwrap();
    let images = (0..n_images)
        .map(|_| ImageInput::Pixels(common::random_image(&bundle.config, rng)))
        .collect();
    (sample, images)
}

#[test]
fn argmax_prefers_the_lowest_index_on_ties() {
    assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0f64; 5]), 0);
    assert_eq!(argmax(&[-1.0f32]), 0);
}

#[test]
fn eos_favoring_model_returns_an_empty_completion() {
    let mut b = common::toy_bundle::<f32>(1);
    let d = b.config.lm_dim;
    let v = b.config.vocab_size;
    b.weights.get_mut("lm.ln_f.g").unwrap().data_mut().fill(0.0);
    b.weights.get_mut("lm.ln_f.b").unwrap().data_mut().fill(1.0);
    let head = b.weights.get_mut("lm.head").unwrap().data_mut();
    for r in 0..d {
        for c in 0..v {
            head[r * v + c] = if c == Special::Eos.id() as usize { 1.0 } else { 0.0 };
        }
    }
    let sample = render_chat(&b.vocab, &[ChatTurn::user("hello", 0)], 512, 8).unwrap();
    let out = greedy_decode(&b, &sample, &[], 10).unwrap();
    assert!(out.tokens.is_empty() && out.hit_eos && !out.truncated);
}

#[test]
fn cached_and_uncached_decoding_agree_on_twenty_prompts() {
    let b = common::toy_bundle::<f32>(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..20 {
        let (sample, images) = random_prompt(&b, &mut rng);
        let cached = decode(&b, &sample, &images, 12, DecodeMode::Greedy, true).unwrap();
        let plain = decode(&b, &sample, &images, 12, DecodeMode::Greedy, false).unwrap();
        assert_eq!(cached, plain, "prompt {k}");
        assert_eq!(greedy_decode(&b, &sample, &images, 12).unwrap(), cached);
    }
}

#[test]
fn decoding_survives_a_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let b = common::toy_bundle::<f32>(4);
    let path = dir.path().join("m.mmf");
    b.save(&path).unwrap();
    let back = ModelBundle::<f32>::load(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..3 {
        let (sample, images) = random_prompt(&b, &mut rng);
        assert_eq!(
            greedy_decode(&b, &sample, &images, 8).unwrap(),
            greedy_decode(&back, &sample, &images, 8).unwrap()
        );
    }
}

#[test]
fn context_exhaustion_sets_the_truncated_flag() {
    let mut b = common::toy_bundle::<f32>(6);
    let sample = render_chat(&b.vocab, &[ChatTurn::user("hi", 0)], 512, 8).unwrap();
    b.config.ctx_limit = sample.ids.len() + 3;
    let out = greedy_decode(&b, &sample, &[], 50).unwrap();
    if !out.hit_eos {
        assert!(out.truncated);
        assert_eq!(out.prompt_len + out.tokens.len(), b.config.ctx_limit);
    }
    b.config.ctx_limit = sample.ids.len() - 1;
    assert!(matches!(greedy_decode(&b, &sample, &[], 5), Err(Error::ContextLength { .. })));
}

#[test]
fn sampling_is_seeded() {
    let b = common::toy_bundle::<f32>(7);
    let sample = render_chat(&b.vocab, &[ChatTurn::user("tell me", 0)], 512, 8).unwrap();
    let mode = DecodeMode::Sample { temperature: 1.5, seed: 11 };
    let a = decode(&b, &sample, &[], 10, mode, true).unwrap();
    assert_eq!(a, decode(&b, &sample, &[], 10, mode, true).unwrap());
    let bad = DecodeMode::Sample { temperature: 0.0, seed: 1 };
    assert!(decode(&b, &sample, &[], 10, bad, true).is_err());
}

#[test]
fn chat_requests_are_validated() {
    let b = common::toy_bundle::<f32>(8);
    let png = png_bytes(1);
    let ok = ChatRequest::new(vec![ChatMessage::user("what is this?").with_png(&png)]);
    let reply = chat(&b, &ok).unwrap();
    assert!(reply.prompt_tokens > b.config.pool_latents);
    assert!(reply.completion_tokens <= DEFAULT_MAX_NEW_TOKENS);

    let on_assistant = ChatRequest::new(vec![
        ChatMessage::user("hi"),
        ChatMessage::assistant("hello").with_png(&png),
        ChatMessage::user("and?"),
    ]);
    assert!(matches!(chat(&b, &on_assistant), Err(Error::Role(_))));
    let ends_with_assistant = ChatRequest::new(vec![ChatMessage::user("hi"), ChatMessage::assistant("hello")]);
    assert!(matches!(chat(&b, &ends_with_assistant), Err(Error::Role(_))));
    assert!(chat(&b, &ChatRequest::new(vec![])).is_err());
    let mut garbage = ChatRequest::new(vec![ChatMessage::user("x")]);
    garbage.messages[0].images.push("***".into());
    assert!(matches!(chat(&b, &garbage), Err(Error::Input(_))));
    let mut not_png = ChatRequest::new(vec![ChatMessage::user("x")]);
    not_png.messages[0] = ChatMessage::user("x").with_png(b"GIF89a not a png");
    assert!(matches!(chat(&b, &not_png), Err(Error::Input(_))));

    let json = r#"{"messages":[{"role":"user","text":"hi"}],"max_new_tokens":3,"greedy":true}"#;
    let parsed: ChatRequest = serde_json::from_str(json).unwrap();
    assert_eq!(parsed.max_new_tokens, Some(3));
    assert!(chat(&b, &parsed).unwrap().completion_tokens <= 3);
}

/// Tiny LM trained to repeat a letter given two turns earlier.
fn history_model() -> ModelBundle {
    let cfg = StackConfig {
        lm_layers: 2,
        lm_heads: 2,
        lm_dim: 32,
        lm_ffn: 64,
        enc_layers: 1,
        pool_layers: 1,
        ..StackConfig::toy()
    };
    let mut bundle = ModelBundle::init(cfg, Vocab::bytes_only(), 1).unwrap();
    let letters = ["p", "q", "r", "s"];
    let records: Vec<InstructionRecord> = (0..32)
        .map(|i| InstructionRecord {
            id: format!("h{i:03}"),
            category: Category::TextOnly,
            images: vec![],
            turns: vec![Turn::new(format!("keep {}", letters[i % 4]), "ok"), Turn::new("which?", letters[i % 4])],
            source: "test".into(),
        })
        .collect();
    let plan = TrainPlan {
        batch_size: 8,
        accumulation: 1,
        epochs: 40,
        peak_lr: 1e-2,
        ..TrainPlan::toy_stage2()
    };
    let dir = tempfile::tempdir().unwrap();
    let ex = prepare_examples(&bundle, &records, dir.path(), &plan).unwrap();
    run_stage(
        &mut bundle,
        &ex,
        &plan,
        &RunOptions {
            out_dir: dir.path().join("run"),
            ..RunOptions::default()
        },
    )
    .unwrap();
    bundle
}

#[test]
fn later_turns_see_earlier_ones() {
    let b = history_model();
    let ask = |history: Vec<ChatMessage>| {
        let mut req = ChatRequest::new(history);
        req.max_new_tokens = Some(4);
        chat(&b, &req).unwrap().text
    };
    for letter in ["p", "r", "s"] {
        let with_history = ask(vec![
            ChatMessage::user(format!("keep {letter}")),
            ChatMessage::assistant("ok"),
            ChatMessage::user("which?"),
        ]);
        assert_eq!(with_history, letter);
        let fresh = ask(vec![ChatMessage::user("which?")]);
        assert_ne!(fresh, with_history, "a fresh session has nothing to recall");
    }
    assert!(!ask(vec![ChatMessage::user("keep q")]).is_empty());
}

struct Server {
    addr: SocketAddr,
    _rt: tokio::runtime::Runtime,
}

fn spawn(app: Router) -> Server {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server { addr, _rt: rt }
}

#[test]
fn http_service_routes_and_statelessness() {
    let bundle = Arc::new(common::toy_bundle::<f32>(9));
    let server = spawn(router(bundle.clone()));
    let base = format!("http://{}", server.addr);

    let health = ureq::get(&format!("{base}/healthz")).call().unwrap().body_mut().read_to_string().unwrap();
    assert_eq!(health, "ok");

    let conversations: Vec<ChatRequest> = (0..4)
        .map(|i| {
            let mut msgs = vec![ChatMessage::user(format!("first question {i}")).with_png(&png_bytes(i))];
            if i % 2 == 1 {
                msgs.push(ChatMessage::assistant(format!("answer {i}")));
                msgs.push(ChatMessage::user("and then?"));
            }
            let mut r = ChatRequest::new(msgs);
            r.max_new_tokens = Some(6);
            r
        })
        .collect();
    let expected: Vec<ChatReply> = conversations.iter().map(|r| chat(&bundle, r).unwrap()).collect();

    // interleave the conversations from concurrent clients, several rounds each
    let handles: Vec<_> = conversations
        .iter()
        .cloned()
        .map(|req| {
            let url = format!("{base}/v1/chat");
            std::thread::spawn(move || {
                (0..3)
                    .map(|_| {
                        ureq::post(&url)
                            .send_json(&req)
                            .unwrap()
                            .body_mut()
                            .read_json::<ChatReply>()
                            .unwrap()
                    })
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(&expected) {
        for got in h.join().unwrap() {
            assert_eq!(&got, want);
        }
    }

    let raw: serde_json::Value = ureq::post(&format!("{base}/v1/chat"))
        .send_json(&conversations[0])
        .unwrap()
        .body_mut()
        .read_json()
        .unwrap();
    for key in ["text", "prompt_tokens", "completion_tokens"] {
        assert!(raw.get(key).is_some(), "{key}");
    }

    let bad = ChatRequest::new(vec![ChatMessage::user("x"), ChatMessage::assistant("y").with_png(&png_bytes(0))]);
    let err = ureq::post(&format!("{base}/v1/chat")).send_json(&bad).unwrap_err();
    assert!(matches!(err, ureq::Error::StatusCode(400)), "{err}");
}

#[derive(Clone)]
struct Script {
    replies: Arc<Mutex<VecDeque<String>>>,
    seen: Arc<Mutex<Vec<(Option<String>, ChatRequest)>>>,
}

async fn scripted(State(s): State<Script>, headers: HeaderMap, Json(req): Json<ChatRequest>) -> Json<ChatReply> {
    let auth = headers.get("authorization").map(|v| v.to_str().unwrap().to_string());
    s.seen.lock().unwrap().push((auth, req));
    let text = s.replies.lock().unwrap().pop_front().unwrap_or_else(|| "exhausted".into());
    Json(ChatReply {
        text,
        prompt_tokens: 0,
        completion_tokens: 0,
    })
}

fn refusal_server(replies: &[&str]) -> (Server, Script) {
    let script = Script {
        replies: Arc::new(Mutex::new(replies.iter().map(|s| s.to_string()).collect())),
        seen: Arc::default(),
    };
    let app = Router::new().route("/v1/chat", post(scripted)).with_state(script.clone());
    (spawn(app), script)
}

const REFUSAL: &str = "I'm sorry, I can't help with identifying medical conditions in images.";

#[test]
fn retry_protocol_against_a_scripted_server() {
    let request = ChatRequest::new(vec![ChatMessage::user("What is shown?").with_png(&png_bytes(2))]);

    let (srv, script) = refusal_server(&[REFUSAL, "Please consult a medical professional.", "It is a circle."]);
    std::env::set_var("VLCHAT_TEST_TOKEN", "s3cret");
    let ep = RemoteEndpoint {
        token_env: Some("VLCHAT_TEST_TOKEN".into()),
        ..RemoteEndpoint::new(format!("http://{}/v1/chat", srv.addr))
    };
    let out = query_with_retry(&ep, &request).unwrap();
    assert_eq!(out.answer.as_deref(), Some("It is a circle."));
    assert_eq!(out.attempts(), 3);
    assert!(matches!(out.transcripts[0], Attempt::Refusal(_)));
    let seen = script.seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    for (auth, req) in seen.iter() {
        assert_eq!(auth.as_deref(), Some("Bearer s3cret"));
        assert_eq!(req, &request, "resubmissions are identical");
    }

    let (srv, _) = refusal_server(&["A square."]);
    let out = query_with_retry(&RemoteEndpoint::new(format!("http://{}/v1/chat", srv.addr)), &request).unwrap();
    assert_eq!((out.attempts(), out.unsuccessful()), (1, false));

    let (srv, script) = refusal_server(&[REFUSAL, REFUSAL, REFUSAL, "never reached"]);
    let out = query_with_retry(&RemoteEndpoint::new(format!("http://{}/v1/chat", srv.addr)), &request).unwrap();
    assert!(out.unsuccessful());
    assert_eq!(out.attempts(), 3);
    assert!(out.transcripts.iter().all(|t| matches!(t, Attempt::Refusal(_))));
    assert_eq!(script.replies.lock().unwrap().len(), 1);

    // an unsuccessful item counts against "all" and is dropped from "successful only"
    let outcome = |correct, unsuccessful| EvalOutcome {
        item_id: "q".into(),
        model_id: "remote".into(),
        setting: Setting::ImageOnly,
        response: String::new(),
        choice: None,
        correct,
        attempts: 1,
        unsuccessful,
        stratum: String::new(),
    };
    let outs = vec![outcome(true, false), outcome(false, out.unsuccessful())];
    assert_eq!(score_remote(&outs, Restriction::All, 0).unwrap().estimate, 0.5);
    assert_eq!(score_remote(&outs, Restriction::SuccessfulOnly, 0).unwrap().estimate, 1.0);
}

#[test]
fn transport_failures_are_attempts_too() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let ep = RemoteEndpoint {
        timeout_secs: 2,
        ..RemoteEndpoint::new(format!("http://127.0.0.1:{port}/v1/chat"))
    };
    let out = query_with_retry(&ep, &ChatRequest::new(vec![ChatMessage::user("hi")])).unwrap();
    assert!(out.unsuccessful());
    assert_eq!(out.attempts(), 3);
    assert!(out.transcripts.iter().all(|t| matches!(t, Attempt::Transport(_))));

    let zero = RemoteEndpoint {
        max_attempts: 0,
        ..ep.clone()
    };
    assert!(matches!(zero.validate(), Err(Error::Config(_))));
    let missing = RemoteEndpoint {
        token_env: Some("VLCHAT_SURELY_UNSET_VAR".into()),
        ..ep
    };
    assert!(matches!(
        query_with_retry(&missing, &ChatRequest::new(vec![ChatMessage::user("hi")])),
        Err(Error::Remote(_))
    ));
}

struct Scripted(Mutex<VecDeque<Result<String, String>>>);

impl Transport for Scripted {
    fn send(&self, _: &ChatRequest) -> Result<String, String> {
        self.0.lock().unwrap().pop_front().unwrap_or(Err("empty".into()))
    }
}

#[test]
fn attempts_never_exceed_the_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let max = rng.gen_range(1..6);
        let script: VecDeque<Result<String, String>> = (0..8)
            .map(|_| match rng.gen_range(0..3) {
                0 => Ok(REFUSAL.to_string()),
                1 => Err("connection reset".to_string()),
                _ => Ok("an answer".to_string()),
            })
            .collect();
        let first_answer = script.iter().position(|r| matches!(r, Ok(t) if t == "an answer"));
        let ep = RemoteEndpoint {
            max_attempts: max,
            ..RemoteEndpoint::new("http://unused")
        };
        let out = query_with_retry_via(&ep, &Scripted(Mutex::new(script)), &ChatRequest::new(vec![])).unwrap();
        assert!(out.attempts() <= max);
        match first_answer {
            Some(i) if i < max => assert_eq!((out.attempts(), out.unsuccessful()), (i + 1, false)),
            _ => {
                assert!(out.unsuccessful());
                assert_eq!(out.attempts(), max);
                assert!(out.transcripts.iter().all(|t| !matches!(t, Attempt::Answer(_))));
            }
        }
    }
}
