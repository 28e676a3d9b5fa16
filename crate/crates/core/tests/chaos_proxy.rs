use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use mq_bench::chaos::{
    fault_proxy_serve, no_reconnect, run_fault_schedule, ChaosError, FailureEvent, FaultStatus, HookOutcome,
    ProxyAdmin, ReconnectHook, RunClock,
};
use mq_bench::header::{build_payload, decode_header, MessageHeader};
use mq_bench::model::{ConnectionKind, ConnectionLog};
use mq_bench::transport::broker::mini_broker_serve;
use mq_bench::transport::{connect, Delivery, QosLevel, TransportKind, TransportOptions};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_util::sync::CancellationToken;

async fn echo_server() -> String {
    let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = l.local_addr().unwrap().to_string();
    tokio::spawn(async move {
        while let Ok((mut s, _)) = l.accept().await {
            tokio::spawn(async move {
                let mut buf = [0u8; 1024];
                while let Ok(n) = s.read(&mut buf).await {
                    if n == 0 || s.write_all(&buf[..n]).await.is_err() {
                        break;
                    }
                }
            });
        }
    });
    addr
}

async fn echo_once(addr: &str) -> std::io::Result<()> {
    let mut s = TcpStream::connect(addr).await?;
    s.write_all(b"ping").await?;
    let mut buf = [0u8; 4];
    s.read_exact(&mut buf).await?;
    assert_eq!(&buf, b"ping");
    Ok(())
}

#[tokio::test]
async fn apply_resets_and_restore_reopens() {
    let upstream = echo_server().await;
    let server = fault_proxy_serve("127.0.0.1:0").await.unwrap();
    let admin = ProxyAdmin::new(&server.admin_url());
    assert!(admin.version().await.unwrap().contains("2."));
    let info = admin.ensure_proxy("echo", "127.0.0.1:0", &upstream).await.unwrap();
    assert!(info.enabled);
    let listen = info.listen.clone();
    echo_once(&listen).await.unwrap();

    let mut held = TcpStream::connect(&listen).await.unwrap();
    held.write_all(b"x").await.unwrap();
    let mut b = [0u8; 1];
    held.read_exact(&mut b).await.unwrap();
    tokio::time::sleep(Duration::from_millis(20)).await;
    assert_eq!(server.live_connections("echo").await, 1);

    admin.apply_failure("echo").await.unwrap();
    let read = tokio::time::timeout(Duration::from_secs(1), held.read(&mut b)).await.unwrap();
    match read {
        Err(e) => assert_eq!(e.kind(), std::io::ErrorKind::ConnectionReset),
        Ok(n) => panic!("expected reset, read {n}"),
    }
    assert!(echo_once(&listen).await.is_err());
    admin.apply_failure("echo").await.unwrap();
    assert!(!admin.get_proxy("echo").await.unwrap().enabled);

    admin.restore("echo").await.unwrap();
    echo_once(&listen).await.unwrap();
    admin.restore("echo").await.unwrap();
    assert!(admin.get_proxy("echo").await.unwrap().toxics.is_empty());

    // Creating again with the same name only updates it.
    let again = admin.ensure_proxy("echo", "127.0.0.1:0", &upstream).await.unwrap();
    assert_eq!(again.listen, listen);
}

#[tokio::test]
async fn unknown_proxy_and_dead_admin() {
    let server = fault_proxy_serve("127.0.0.1:0").await.unwrap();
    let admin = ProxyAdmin::new(&server.admin_url());
    assert!(matches!(admin.apply_failure("nope").await, Err(ChaosError::ProxyNotFound(_))));
    assert!(matches!(admin.restore("nope").await, Err(ChaosError::ProxyNotFound(_))));
    let url = server.admin_url();
    server.shutdown().await;
    tokio::time::sleep(Duration::from_millis(50)).await;
    let dead = ProxyAdmin::new(&url);
    assert!(matches!(dead.apply_failure("x").await, Err(ChaosError::AdminUnreachable(_))));
}

#[tokio::test]
async fn mqtt_session_survives_outage_with_redelivery() {
    let broker = mini_broker_serve("127.0.0.1:0").await.unwrap();
    let server = fault_proxy_serve("127.0.0.1:0").await.unwrap();
    let admin = ProxyAdmin::new(&server.admin_url());
    let info = admin
        .ensure_proxy("mqtt", "127.0.0.1:0", &broker.local_addr().to_string())
        .await
        .unwrap();
    let via_proxy = format!("tcp://{}", info.listen);

    let log = ConnectionLog::new();
    let opts = TransportOptions::new("sub-persist").clean_session(false).with_events(log.clone());
    let mut sub = connect(TransportKind::Mqtt, &via_proxy, opts).await.unwrap();
    let got: Arc<Mutex<Vec<Delivery>>> = Arc::default();
    let g = got.clone();
    sub.subscribe("q/0", QosLevel::AtLeastOnce, Box::new(move |d| g.lock().unwrap().push(d)))
        .await
        .unwrap();
    let mut publ = connect(TransportKind::Mqtt, &broker.endpoint(), TransportOptions::new("pub-persist"))
        .await
        .unwrap();
    let payload = |seq| -> Bytes { build_payload(&MessageHeader::new(seq, 1), 32).unwrap() };
    publ.publish("q/0", payload(0), QosLevel::AtLeastOnce).await.unwrap();

    admin.apply_failure("mqtt").await.unwrap();
    let mut dropped = false;
    for _ in 0..100 {
        if !sub.is_connected() {
            dropped = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert!(dropped, "subscriber still connected 1 s after apply");
    assert!(log.snapshot().iter().any(|e| e.kind == ConnectionKind::Disconnect));

    for seq in 1..=5 {
        publ.publish("q/0", payload(seq), QosLevel::AtLeastOnce).await.unwrap();
    }
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert_eq!(broker.queued_for("sub-persist"), 5);

    admin.restore("mqtt").await.unwrap();
    if let Some(h) = sub.reconnect_handle() {
        h.trigger();
    }
    for _ in 0..300 {
        if got.lock().unwrap().len() >= 6 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let mut seqs: Vec<u64> = got.lock().unwrap().iter().map(|d| decode_header(&d.payload).unwrap().seq).collect();
    seqs.dedup();
    assert_eq!(seqs, [0, 1, 2, 3, 4, 5]);
    assert!(log.snapshot().iter().any(|e| e.kind == ConnectionKind::Reconnect));
}

#[tokio::test]
async fn executor_follows_schedule_and_continues_on_error() {
    let upstream = echo_server().await;
    let server = fault_proxy_serve("127.0.0.1:0").await.unwrap();
    let admin = ProxyAdmin::new(&server.admin_url());
    admin.ensure_proxy("p", "127.0.0.1:0", &upstream).await.unwrap();
    let schedule: Vec<FailureEvent> = (0..5)
        .map(|i| FailureEvent {
            fail_at_s: 0.2 + i as f64 * 0.3,
            recover_at_s: 0.3 + i as f64 * 0.3,
        })
        .collect();

    // The third outage finds the proxy gone; the hook puts it back.
    let calls = Arc::new(AtomicUsize::new(0));
    let hook: ReconnectHook = {
        let admin = admin.clone();
        let calls = calls.clone();
        let upstream = upstream.clone();
        Box::new(move || {
            let admin = admin.clone();
            let calls = calls.clone();
            let upstream = upstream.clone();
            Box::pin(async move {
                match calls.fetch_add(1, Ordering::SeqCst) {
                    1 => admin.delete_proxy("p").await.unwrap(),
                    2 => {
                        admin.ensure_proxy("p", "127.0.0.1:0", &upstream).await.unwrap();
                    }
                    _ => {}
                }
                HookOutcome { reconnected: 1, failed: 0 }
            })
        })
    };
    let clock = RunClock::starting_now();
    let log = run_fault_schedule(&schedule, &admin, "p", &hook, clock, CancellationToken::new()).await;
    assert_eq!(log.len(), 5);
    let statuses: Vec<FaultStatus> = log.iter().map(|e| e.status).collect();
    assert_eq!(
        statuses,
        [FaultStatus::Ok, FaultStatus::Ok, FaultStatus::ApplyFailed, FaultStatus::Ok, FaultStatus::Ok]
    );
    assert!(log[2].error.as_deref().unwrap().contains("not found"));
    for e in &log {
        assert!((e.fail_offset_s - e.scheduled_fail_s).abs() < 0.1, "{e:?}");
        assert!((e.recover_offset_s - e.scheduled_recover_s).abs() < 0.1, "{e:?}");
        assert!(e.actual_recover_ns > e.actual_fail_ns);
    }
    let total: f64 = log.iter().map(|e| e.downtime_s()).sum();
    assert!((total - 0.5).abs() < 0.1, "{total}");
}

#[tokio::test]
async fn empty_schedule_and_stop_restore() {
    let upstream = echo_server().await;
    let server = fault_proxy_serve("127.0.0.1:0").await.unwrap();
    let admin = ProxyAdmin::new(&server.admin_url());
    let info = admin.ensure_proxy("p", "127.0.0.1:0", &upstream).await.unwrap();
    let hook = no_reconnect();
    let log = run_fault_schedule(&[], &admin, "p", &hook, RunClock::starting_now(), CancellationToken::new()).await;
    assert!(log.is_empty());

    let stop = CancellationToken::new();
    let schedule = [
        FailureEvent { fail_at_s: 0.05, recover_at_s: 30.0 },
        FailureEvent { fail_at_s: 40.0, recover_at_s: 45.0 },
    ];
    let task = {
        let admin = admin.clone();
        let stop = stop.clone();
        tokio::spawn(async move {
            run_fault_schedule(&schedule, &admin, "p", &no_reconnect(), RunClock::starting_now(), stop).await
        })
    };
    tokio::time::sleep(Duration::from_millis(200)).await;
    assert!(echo_once(&info.listen).await.is_err());
    stop.cancel();
    let log = task.await.unwrap();
    assert_eq!(log[0].status, FaultStatus::Ok);
    assert_eq!(log[1].status, FaultStatus::Skipped);
    echo_once(&info.listen).await.unwrap();
}
