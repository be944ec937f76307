//! Interaction storage, neighbor lookup, chronological splits, negative
//! sampling and a synthetic stream generator.

mod index;
mod log;
mod negative;
mod split;
mod synth;

pub use index::{NeighborEntry, NeighborIndex};
pub use log::{convert_benchmark_csv, load_events, EventLog, Interaction, NodeId};
pub use negative::{NegativeSampler, Protocol};
pub use split::{chronological_split, Mode, Phase, SplitSpec};
pub use synth::{synth_generate, synth_generate_with, SynthParams};
