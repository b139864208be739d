//! Greedy decoding, stateless multi-turn chat, the HTTP service and a
//! client for remote chat endpoints.

mod chat;
mod decode;
mod remote;
mod server;

pub use chat::{chat, decode_png, ChatMessage, ChatReply, ChatRequest, DEFAULT_MAX_NEW_TOKENS};
pub use decode::{argmax, decode, greedy_decode, DecodeMode, Decoded};
pub use remote::{
    query_with_retry, query_with_retry_via, Attempt, HttpTransport, RemoteEndpoint, RemoteOutcome, Transport,
    DEFAULT_REFUSAL_PATTERNS,
};
pub use server::{router, serve};
