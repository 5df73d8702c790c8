//! Batch engine for generating strategy-injected social dialogue corpora
//! and evaluating them for social capability and instruction following.
//!
//! Two persona-conditioned agents self-play a social task. After an
//! initialization phase, every action is rated by the expert itself
//! (current and predicted goal achievement); the rating routes the next
//! action through one of three generation modes — the expert's native
//! strategy, a light conflict-awareness prompt, or a four-phase negotiation
//! workflow with explicit utility bookkeeping. Finished dialogues are
//! filtered on final goal achievement, regenerated when weak, and exported
//! as instruction-tuning pairs; separate judges score the seven social
//! dimensions and the diversity/relevance instruction-following metrics.

pub mod action;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod dialogue;
pub mod eval;
pub mod engine;
pub mod gateway;
pub mod profile;
pub mod negotiation;
pub mod prompts;
pub mod rater;
pub mod sif;
pub mod strategy;

pub use action::{parse_action, Action, ActionType, ParseError};
pub use dialogue::{action_content, render_transcript, DialogueRecord, Turn, TurnStrategy};
pub use profile::{load_tasks, AgentProfile, TaskProfile};
