//! Open-loop load generation.

mod bucket;
mod publisher;
mod subscriber;

use thiserror::Error;

pub use bucket::{Acquire, TokenBucket};
pub use publisher::{run_publisher, run_publisher_with, stagger_offset, PublisherConfig, PublisherStats};
pub use subscriber::{run_subscriber, SampleCollector, SinkFactory, SubscriberOutput};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("session closed after {} messages", stats.published_count)]
    AbortedByTransport { stats: PublisherStats },
    #[error(transparent)]
    Payload(#[from] crate::header::HeaderError),
}
