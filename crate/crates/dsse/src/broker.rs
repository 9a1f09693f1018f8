//! Publish/subscribe bus for actuation commands.
//!
//! Topic filters follow MQTT rules: `+` matches one level, a trailing `#`
//! matches any remainder including the parent level, and wildcards at the
//! first level never match topics starting with `$`. QoS 1 deliveries are
//! repeated until the subscriber acknowledges them.
//!
//! Remote clients use a line protocol over TCP (one command per line):
//!
//! ```text
//! CONNECT <client-id>            -> CONNACK
//! SUB <qos> <filter>             -> SUBACK <sub-id> | ERR <reason>
//! UNSUB <sub-id>                 -> UNSUBACK
//! PUB <qos> <topic> <json>       -> PUBACK <matched> | ERR <reason>
//! ACK <sub-id> <msg-id>          (no reply)
//! PING                           -> PONG
//! server push: MSG <sub-id> <msg-id> <qos> <topic> <json>
//! ```

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use gridmesh_core::report::{validate_topic, Command, Qos, TopicError};
use serde_json::{Map, Value};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("filter is empty")]
    Empty,
    #[error("`#` must be the last level and stand alone")]
    MultiLevel,
    #[error("`+` must stand alone in its level")]
    SingleLevel,
    #[error("filter contains a NUL character")]
    Nul,
}

pub fn validate_filter(filter: &str) -> Result<(), FilterError> {
    if filter.is_empty() {
        return Err(FilterError::Empty);
    }
    if filter.contains('\0') {
        return Err(FilterError::Nul);
    }
    let levels: Vec<&str> = filter.split('/').collect();
    for (i, level) in levels.iter().enumerate() {
        if level.contains('#') && (*level != "#" || i + 1 != levels.len()) {
            return Err(FilterError::MultiLevel);
        }
        if level.contains('+') && *level != "+" {
            return Err(FilterError::SingleLevel);
        }
    }
    Ok(())
}

/// Whether a concrete topic matches a (valid) filter.
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    if topic.starts_with('$') && (filter.starts_with('+') || filter.starts_with('#')) {
        return false;
    }
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub sub_id: u64,
    pub msg_id: u64,
    pub topic: String,
    pub payload: Map<String, Value>,
    pub qos: Qos,
    pub redelivery: bool,
}

struct Pending {
    delivery: Delivery,
    sent: Instant,
}

struct Sub {
    filter: String,
    qos: Qos,
    tx: mpsc::UnboundedSender<Delivery>,
    pending: BTreeMap<u64, Pending>,
}

#[derive(Default)]
struct State {
    subs: BTreeMap<u64, Sub>,
    next_sub: u64,
    next_msg: u64,
}

#[derive(Clone, Default)]
pub struct Broker {
    state: Arc<Mutex<State>>,
}

fn min_qos(a: Qos, b: Qos) -> Qos {
    if a == Qos::AtLeastOnce && b == Qos::AtLeastOnce {
        Qos::AtLeastOnce
    } else {
        Qos::AtMostOnce
    }
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&self, filter: &str, qos: Qos) -> Result<Subscription, FilterError> {
        validate_filter(filter)?;
        let (tx, rx) = mpsc::unbounded_channel();
        let mut st = self.state.lock().unwrap();
        st.next_sub += 1;
        let id = st.next_sub;
        st.subs.insert(
            id,
            Sub {
                filter: filter.to_string(),
                qos,
                tx,
                pending: BTreeMap::new(),
            },
        );
        Ok(Subscription {
            id,
            rx,
            broker: self.clone(),
        })
    }

    pub fn unsubscribe(&self, sub_id: u64) {
        self.state.lock().unwrap().subs.remove(&sub_id);
    }

    /// Delivers a command to every matching subscription and returns how
    /// many matched.
    pub fn publish(&self, cmd: &Command) -> Result<usize, TopicError> {
        validate_topic(&cmd.topic)?;
        let mut st = self.state.lock().unwrap();
        let mut matched = 0;
        let mut next_msg = st.next_msg;
        let mut closed = Vec::new();
        for (&sub_id, sub) in st.subs.iter_mut() {
            if !topic_matches(&sub.filter, &cmd.topic) {
                continue;
            }
            matched += 1;
            next_msg += 1;
            let delivery = Delivery {
                sub_id,
                msg_id: next_msg,
                topic: cmd.topic.clone(),
                payload: cmd.payload.clone(),
                qos: min_qos(cmd.qos, sub.qos),
                redelivery: false,
            };
            if delivery.qos == Qos::AtLeastOnce {
                sub.pending.insert(
                    delivery.msg_id,
                    Pending {
                        delivery: delivery.clone(),
                        sent: Instant::now(),
                    },
                );
            }
            if sub.tx.send(delivery).is_err() {
                closed.push(sub_id);
            }
        }
        st.next_msg = next_msg;
        for id in closed {
            st.subs.remove(&id);
        }
        Ok(matched)
    }

    pub fn ack(&self, sub_id: u64, msg_id: u64) -> bool {
        let mut st = self.state.lock().unwrap();
        st.subs.get_mut(&sub_id).is_some_and(|s| s.pending.remove(&msg_id).is_some())
    }

    /// Resends QoS 1 deliveries unacknowledged for at least `after`.
    pub fn redeliver(&self, after: Duration) -> usize {
        let mut st = self.state.lock().unwrap();
        let now = Instant::now();
        let mut count = 0;
        for sub in st.subs.values_mut() {
            for p in sub.pending.values_mut() {
                if now.duration_since(p.sent) >= after {
                    p.sent = now;
                    let mut d = p.delivery.clone();
                    d.redelivery = true;
                    if sub.tx.send(d).is_ok() {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    pub fn pending(&self) -> usize {
        self.state.lock().unwrap().subs.values().map(|s| s.pending.len()).sum()
    }

    /// Runs [`Broker::redeliver`] every `interval` until the returned task is
    /// aborted.
    pub fn spawn_redelivery(&self, interval: Duration) -> tokio::task::JoinHandle<()> {
        let broker = self.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(interval);
            loop {
                tick.tick().await;
                broker.redeliver(interval);
            }
        })
    }
}

pub struct Subscription {
    pub id: u64,
    rx: mpsc::UnboundedReceiver<Delivery>,
    broker: Broker,
}

impl Subscription {
    pub async fn recv(&mut self) -> Option<Delivery> {
        self.rx.recv().await
    }

    pub fn try_recv(&mut self) -> Option<Delivery> {
        self.rx.try_recv().ok()
    }

    pub fn ack(&self, d: &Delivery) -> bool {
        self.broker.ack(self.id, d.msg_id)
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.broker.unsubscribe(self.id);
    }
}

fn parse_qos(s: &str) -> Result<Qos, String> {
    match s {
        "0" => Ok(Qos::AtMostOnce),
        "1" => Ok(Qos::AtLeastOnce),
        _ => Err(format!("bad qos `{s}`")),
    }
}

fn qos_digit(q: Qos) -> u8 {
    match q {
        Qos::AtMostOnce => 0,
        Qos::AtLeastOnce => 1,
    }
}

/// Accepts line-protocol clients until the listener fails.
pub async fn serve(listener: TcpListener, broker: Broker) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let broker = broker.clone();
        tokio::spawn(async move {
            if let Err(e) = handle_client(stream, broker).await {
                log::debug!("broker client {peer}: {e}");
            }
        });
    }
}

async fn handle_client(stream: TcpStream, broker: Broker) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<String>();
    let writer = tokio::spawn(async move {
        while let Some(line) = out_rx.recv().await {
            if write.write_all(line.as_bytes()).await.is_err() || write.write_all(b"\n").await.is_err() {
                break;
            }
        }
    });
    let mut connected = false;
    let mut subs: BTreeMap<u64, tokio::task::JoinHandle<()>> = BTreeMap::new();
    while let Some(line) = lines.next_line().await? {
        let reply = match handle_line(&line, &broker, &mut connected, &mut subs, &out_tx) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(e) => format!("ERR {e}"),
        };
        if out_tx.send(reply).is_err() {
            break;
        }
    }
    for (id, task) in subs {
        task.abort();
        broker.unsubscribe(id);
    }
    drop(out_tx);
    let _ = writer.await;
    Ok(())
}

fn handle_line(
    line: &str,
    broker: &Broker,
    connected: &mut bool,
    subs: &mut BTreeMap<u64, tokio::task::JoinHandle<()>>,
    out: &mpsc::UnboundedSender<String>,
) -> Result<Option<String>, String> {
    let line = line.trim_end_matches('\r');
    let (verb, rest) = line.split_once(' ').unwrap_or((line, ""));
    if !*connected {
        if verb == "CONNECT" && !rest.is_empty() {
            *connected = true;
            return Ok(Some("CONNACK".into()));
        }
        return Err("expected CONNECT <client-id>".into());
    }
    match verb {
        "PING" => Ok(Some("PONG".into())),
        "SUB" => {
            let (qos, filter) = rest.split_once(' ').ok_or("usage: SUB <qos> <filter>")?;
            let mut sub = broker.subscribe(filter, parse_qos(qos)?).map_err(|e| e.to_string())?;
            let id = sub.id;
            let out = out.clone();
            let task = tokio::spawn(async move {
                while let Some(d) = sub.recv().await {
                    let payload = serde_json::to_string(&d.payload).expect("map serializes");
                    let line = format!("MSG {} {} {} {} {}", d.sub_id, d.msg_id, qos_digit(d.qos), d.topic, payload);
                    if out.send(line).is_err() {
                        break;
                    }
                }
            });
            subs.insert(id, task);
            Ok(Some(format!("SUBACK {id}")))
        }
        "UNSUB" => {
            let id: u64 = rest.parse().map_err(|_| "usage: UNSUB <sub-id>")?;
            if let Some(task) = subs.remove(&id) {
                task.abort();
                broker.unsubscribe(id);
            }
            Ok(Some("UNSUBACK".into()))
        }
        "PUB" => {
            let mut parts = rest.splitn(3, ' ');
            let (Some(qos), Some(topic), Some(json)) = (parts.next(), parts.next(), parts.next()) else {
                return Err("usage: PUB <qos> <topic> <json>".into());
            };
            let payload: Map<String, Value> = serde_json::from_str(json).map_err(|e| format!("bad payload: {e}"))?;
            let mut cmd = Command::new(topic, parse_qos(qos)?).map_err(|e| e.to_string())?;
            cmd.payload = payload;
            let n = broker.publish(&cmd).map_err(|e| e.to_string())?;
            Ok(Some(format!("PUBACK {n}")))
        }
        "ACK" => {
            let (sub, msg) = rest.split_once(' ').ok_or("usage: ACK <sub-id> <msg-id>")?;
            let (sub, msg) = (sub.parse::<u64>(), msg.parse::<u64>());
            if let (Ok(s), Ok(m)) = (sub, msg) {
                if subs.contains_key(&s) {
                    broker.ack(s, m);
                }
                Ok(None)
            } else {
                Err("usage: ACK <sub-id> <msg-id>".into())
            }
        }
        _ => Err(format!("unknown verb `{verb}`")),
    }
}

/// Binds the line-protocol listener and serves it in the background.
pub async fn spawn_tcp(addr: SocketAddr, broker: Broker) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let task = tokio::spawn(async move {
        if let Err(e) = serve(listener, broker).await {
            log::error!("broker listener stopped: {e}");
        }
    });
    Ok((local, task))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use regex::Regex;

    /// Independent matcher: translate the filter into an anchored regex.
    fn reference_matches(filter: &str, topic: &str) -> bool {
        if topic.starts_with('$') && (filter.starts_with('+') || filter.starts_with('#')) {
            return false;
        }
        let levels: Vec<&str> = filter.split('/').collect();
        let mut pattern = String::from("^");
        for (i, level) in levels.iter().enumerate() {
            match *level {
                "#" if i == 0 => pattern.push_str(".*"),
                "#" => {
                    // `a/#` also matches `a`: make the separator optional too.
                    pattern.truncate(pattern.len() - 1);
                    pattern.push_str("(/.*)?");
                }
                "+" => pattern.push_str("[^/]*"),
                lit => pattern.push_str(&regex::escape(lit)),
            }
            if i + 1 < levels.len() {
                pattern.push('/');
            }
        }
        pattern.push('$');
        Regex::new(&pattern).unwrap().is_match(topic)
    }

    fn level() -> impl Strategy<Value = String> {
        prop_oneof![Just("a".to_string()), Just("b".to_string()), Just(String::new()), Just("$s".to_string())]
    }

    fn topic() -> impl Strategy<Value = String> {
        prop::collection::vec(level(), 1..5).prop_map(|l| l.join("/"))
    }

    fn filter() -> impl Strategy<Value = String> {
        (
            prop::collection::vec(prop_oneof![level(), Just("+".to_string())], 0..5),
            any::<bool>(),
        )
            .prop_filter_map("non-empty", |(mut l, hash)| {
                if hash {
                    l.push("#".into());
                }
                let f = l.join("/");
                (!f.is_empty()).then_some(f)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn matcher_agrees_with_reference(f in filter(), t in topic()) {
            prop_assert!(validate_filter(&f).is_ok());
            prop_assert_eq!(topic_matches(&f, &t), reference_matches(&f, &t), "filter {} topic {}", f, t);
        }
    }

    #[test]
    fn matching_edge_cases() {
        assert!(topic_matches("grid/#", "grid"));
        assert!(topic_matches("grid/+/curtail", "grid/75/curtail"));
        assert!(!topic_matches("grid/+", "grid/75/curtail"));
        assert!(topic_matches("#", "grid/75"));
        assert!(!topic_matches("#", "$SYS/load"));
        assert!(topic_matches("$SYS/#", "$SYS/load"));
        assert!(topic_matches("+/+", "/x"));
        assert_eq!(validate_filter("a/#/b"), Err(FilterError::MultiLevel));
        assert_eq!(validate_filter("a+"), Err(FilterError::SingleLevel));
        assert_eq!(validate_filter(""), Err(FilterError::Empty));
    }

    fn cmd(topic: &str, qos: Qos) -> Command {
        Command::new(topic, qos).unwrap().with("k", 1)
    }

    #[test]
    fn qos1_is_redelivered_until_acked() {
        let broker = Broker::new();
        let mut sub = broker.subscribe("grid/#", Qos::AtLeastOnce).unwrap();
        assert_eq!(broker.publish(&cmd("grid/der/75", Qos::AtLeastOnce)).unwrap(), 1);
        let first = sub.try_recv().unwrap();
        assert!(!first.redelivery);
        assert_eq!(broker.redeliver(Duration::ZERO), 1);
        let again = sub.try_recv().unwrap();
        assert!(again.redelivery && again.msg_id == first.msg_id);
        assert!(sub.ack(&again));
        assert_eq!(broker.redeliver(Duration::ZERO), 0);
        assert_eq!(broker.pending(), 0);
    }

    #[test]
    fn qos0_is_fire_and_forget() {
        let broker = Broker::new();
        let mut sub = broker.subscribe("grid/#", Qos::AtMostOnce).unwrap();
        broker.publish(&cmd("grid/der/75", Qos::AtLeastOnce)).unwrap();
        assert_eq!(sub.try_recv().unwrap().qos, Qos::AtMostOnce);
        assert_eq!(broker.redeliver(Duration::ZERO), 0);
        assert_eq!(broker.publish(&cmd("other", Qos::AtMostOnce)).unwrap(), 0);
    }

    #[test]
    fn dropped_subscription_unsubscribes() {
        let broker = Broker::new();
        drop(broker.subscribe("#", Qos::AtLeastOnce).unwrap());
        assert_eq!(broker.publish(&cmd("a", Qos::AtLeastOnce)).unwrap(), 0);
    }

    #[tokio::test]
    async fn line_protocol_round_trip() {
        let broker = Broker::new();
        let (addr, _task) = spawn_tcp("127.0.0.1:0".parse().unwrap(), broker.clone()).await.unwrap();
        let stream = TcpStream::connect(addr).await.unwrap();
        let (r, mut w) = stream.into_split();
        let mut lines = BufReader::new(r).lines();
        let mut send = async |l: &str| {
            w.write_all(format!("{l}\n").as_bytes()).await.unwrap();
        };
        send("SUB 1 grid/#").await;
        assert!(lines.next_line().await.unwrap().unwrap().starts_with("ERR"));
        send("CONNECT test").await;
        assert_eq!(lines.next_line().await.unwrap().unwrap(), "CONNACK");
        send("SUB 1 grid/+/curtail").await;
        let suback = lines.next_line().await.unwrap().unwrap();
        let sub_id: u64 = suback.strip_prefix("SUBACK ").unwrap().parse().unwrap();
        send("SUB 1 bad/#/x").await;
        assert!(lines.next_line().await.unwrap().unwrap().starts_with("ERR"));
        send(r#"PUB 1 grid/75/curtail {"p":0.5}"#).await;
        let msg = lines.next_line().await.unwrap().unwrap();
        let puback = lines.next_line().await.unwrap().unwrap();
        let (msg, puback) = if msg.starts_with("MSG") { (msg, puback) } else { (puback, msg) };
        assert_eq!(puback, "PUBACK 1");
        let parts: Vec<&str> = msg.splitn(6, ' ').collect();
        assert_eq!(parts[1].parse::<u64>().unwrap(), sub_id);
        assert_eq!(parts[4], "grid/75/curtail");
        assert_eq!(parts[5], r#"{"p":0.5}"#);
        assert_eq!(broker.pending(), 1);
        send(&format!("ACK {sub_id} {}", parts[2])).await;
        send("PING").await;
        assert_eq!(lines.next_line().await.unwrap().unwrap(), "PONG");
        assert_eq!(broker.pending(), 0);
    }
}
