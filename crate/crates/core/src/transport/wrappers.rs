//! Session decorators for exercising the load path under adverse transports.

use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;

use super::{MessageSink, QosLevel, ReconnectHandle, Session, Subscription, TransportError, TransportKind};

/// Adds a fixed delay before every publish completes.
pub struct DelayedPublish {
    inner: Box<dyn Session>,
    delay: Duration,
}

impl DelayedPublish {
    pub fn new(inner: Box<dyn Session>, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

#[async_trait]
impl Session for DelayedPublish {
    fn kind(&self) -> TransportKind {
        self.inner.kind()
    }

    fn client_id(&self) -> &str {
        self.inner.client_id()
    }

    fn is_connected(&self) -> bool {
        self.inner.is_connected()
    }

    async fn publish(&mut self, topic: &str, payload: Bytes, qos: QosLevel) -> Result<(), TransportError> {
        tokio::time::sleep(self.delay).await;
        self.inner.publish(topic, payload, qos).await
    }

    async fn subscribe(&mut self, topic: &str, qos: QosLevel, sink: MessageSink) -> Result<Subscription, TransportError> {
        self.inner.subscribe(topic, qos, sink).await
    }

    async fn disconnect(&mut self) -> Result<(), TransportError> {
        self.inner.disconnect().await
    }

    fn is_closed(&self) -> bool {
        self.inner.is_closed()
    }

    fn reconnect_handle(&self) -> Option<ReconnectHandle> {
        self.inner.reconnect_handle()
    }
}

/// A broker that refuses every publish.
pub struct RejectingPublish {
    inner: Box<dyn Session>,
}

impl RejectingPublish {
    pub fn new(inner: Box<dyn Session>) -> Self {
        Self { inner }
    }
}

#[async_trait]
impl Session for RejectingPublish {
    fn kind(&self) -> TransportKind {
        self.inner.kind()
    }

    fn client_id(&self) -> &str {
        self.inner.client_id()
    }

    fn is_connected(&self) -> bool {
        self.inner.is_connected()
    }

    async fn publish(&mut self, _topic: &str, _payload: Bytes, _qos: QosLevel) -> Result<(), TransportError> {
        Err(TransportError::Protocol("publish rejected".into()))
    }

    async fn subscribe(&mut self, topic: &str, qos: QosLevel, sink: MessageSink) -> Result<Subscription, TransportError> {
        self.inner.subscribe(topic, qos, sink).await
    }

    async fn disconnect(&mut self) -> Result<(), TransportError> {
        self.inner.disconnect().await
    }

    fn is_closed(&self) -> bool {
        self.inner.is_closed()
    }
}
