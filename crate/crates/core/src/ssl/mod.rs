pub mod bestrq;
pub mod joist;
pub mod quantizer;
pub mod tts;

pub use bestrq::{bestrq_forward, bestrq_loss};
pub use joist::{joist_forward, JoistOutput};
pub use quantizer::{init_quantizer, Quantizer};
pub use tts::{TextToSpeech, TtsOracle};
