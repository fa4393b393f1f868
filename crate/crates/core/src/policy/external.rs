//! Agents that live in another process.
//!
//! The engine writes one JSON request per line and waits for the matching
//! response line. While a request is pending the agent may interleave any
//! number of read-only market queries:
//!
//! ```text
//! engine -> {"id":7,"kind":"bid","agent_id":3,"observation":{...}}
//! agent  -> {"id":7,"query":"check_balance","agent_id":3}
//! engine -> {"id":7,"answer":{...}}
//! agent  -> {"id":7,"decision":{"bids":[{"listing_id":12,"price":0.4}]}}
//! ```
//!
//! Responses with a stale id are skipped, so a decision that arrives after
//! its timeout cannot be mistaken for the next one.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    AgentPolicy, AutarkyObservation, BeliefObservation, BidDecision, BidObservation, DecisionContext, PaymentObservation,
    PlanObservation, PolicyError, Selection, SelectionObservation,
};
use crate::api::Query;
use crate::economy::AgentId;
use crate::execution::{ExecutionPlan, Tier};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Bid,
    Select,
    Plan,
    Pay,
    Belief,
    Autarky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub kind: RequestKind,
    pub agent_id: AgentId,
    pub observation: Value,
}

/// Decision payloads, one per request kind. Plans are sent as a bare
/// [`ExecutionPlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidsReply {
    #[serde(default)]
    pub bids: Vec<BidDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectReply {
    pub winner: Option<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayReply {
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefReply {
    pub belief: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutarkyReply {
    pub plan: Option<ExecutionPlan>,
}

/// A line sent by an agent.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentMessage {
    Query { id: u64, query: Query },
    Decision { id: u64, decision: Value },
}

impl AgentMessage {
    pub fn parse(line: &str) -> Result<Self, String> {
        let value: Value = serde_json::from_str(line).map_err(|e| format!("not JSON: {e}"))?;
        let id = value.get("id").and_then(Value::as_u64).ok_or("missing numeric id")?;
        if value.get("query").is_some() {
            let query = Query::deserialize(&value).map_err(|e| format!("bad query: {e}"))?;
            return Ok(Self::Query { id, query });
        }
        match value.get("decision") {
            Some(d) => Ok(Self::Decision { id, decision: d.clone() }),
            None => Err("line has neither query nor decision".into()),
        }
    }
}

/// One line-oriented connection to an agent process.
pub struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<String>,
    next_id: u64,
    timeout: Duration,
    closed: bool,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl Connection {
    /// Wrap a reader/writer pair. A background thread feeds lines from
    /// the reader; end of stream reads as a disconnect.
    pub fn from_io(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Self {
            writer: Box::new(writer),
            lines: rx,
            next_id: 1,
            timeout: DEFAULT_TIMEOUT,
            closed: false,
            child: None,
            socket: None,
        }
    }

    pub fn tcp(stream: TcpStream) -> io::Result<Self> {
        // decisions are single small lines; don't let Nagle hold them back
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let socket = stream.try_clone()?;
        let mut conn = Self::from_io(reader, stream);
        conn.socket = Some(socket);
        Ok(conn)
    }

    /// Launch a child process and talk to it over its standard streams.
    pub fn spawn(command: &mut Command) -> io::Result<Self> {
        let mut child = command.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut conn = Self::from_io(stdout, stdin);
        conn.child = Some(child);
        Ok(conn)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn write_value(&mut self, value: &impl Serialize) -> Result<(), PolicyError> {
        let mut line = serde_json::to_string(value).map_err(|e| PolicyError::Failed(e.to_string()))?;
        line.push('\n');
        if self.writer.write_all(line.as_bytes()).and_then(|_| self.writer.flush()).is_err() {
            self.closed = true;
            return Err(PolicyError::Disconnected);
        }
        Ok(())
    }

    /// Read the next raw line, waiting at most `timeout`.
    pub fn recv_line(&mut self, timeout: Duration) -> Result<String, PolicyError> {
        match self.lines.recv_timeout(timeout) {
            Ok(line) => Ok(line),
            Err(RecvTimeoutError::Timeout) => Err(PolicyError::Timeout),
            Err(RecvTimeoutError::Disconnected) => {
                self.closed = true;
                Err(PolicyError::Disconnected)
            }
        }
    }

    pub fn send(&mut self, value: &impl Serialize) -> Result<(), PolicyError> {
        if self.closed {
            return Err(PolicyError::Disconnected);
        }
        self.write_value(value)
    }

    /// Send one request and wait for its decision, answering queries in
    /// the meantime.
    pub fn exchange(
        &mut self,
        kind: RequestKind,
        agent_id: AgentId,
        observation: Value,
        ctx: &DecisionContext<'_>,
    ) -> Result<Value, PolicyError> {
        if self.closed {
            return Err(PolicyError::Disconnected);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.write_value(&Request { id, kind, agent_id, observation })?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let line = self.recv_line(remaining)?;
            if line.trim().is_empty() {
                continue;
            }
            match AgentMessage::parse(&line).map_err(PolicyError::Protocol)? {
                AgentMessage::Decision { id: got, .. } if got != id => {
                    ::log::debug!("skipping stale response {got} while waiting for {id}");
                }
                AgentMessage::Decision { decision, .. } => return Ok(decision),
                AgentMessage::Query { id: qid, query } => {
                    let reply = match ctx.market.answer(&query) {
                        Ok(answer) => json!({ "id": qid, "answer": answer }),
                        Err(e) => json!({ "id": qid, "error": e.to_string() }),
                    };
                    self.write_value(&reply)?;
                }
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        // the reader thread holds its own handle; shut the socket so both ends see EOF
        if let Some(socket) = &self.socket {
            let _ = socket.shutdown(std::net::Shutdown::Both);
        }
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

pub type SharedConnection = Arc<Mutex<Connection>>;

/// Policy backed by a remote agent. Children spawned by evolution share
/// the parent's connection and are addressed by their own agent id.
pub struct ExternalPolicy {
    conn: SharedConnection,
    label: String,
}

impl ExternalPolicy {
    pub fn new(conn: SharedConnection, label: impl Into<String>) -> Self {
        Self { conn, label: label.into() }
    }

    pub fn connection(&self) -> SharedConnection {
        Arc::clone(&self.conn)
    }

    fn call<T: DeserializeOwned>(
        &self,
        kind: RequestKind,
        agent_id: AgentId,
        obs: &impl Serialize,
        ctx: &DecisionContext<'_>,
    ) -> Result<T, PolicyError> {
        let observation = serde_json::to_value(obs).map_err(|e| PolicyError::Failed(e.to_string()))?;
        let mut conn = self.conn.lock().map_err(|_| PolicyError::Failed("connection lock poisoned".into()))?;
        let decision = conn.exchange(kind, agent_id, observation, ctx)?;
        serde_json::from_value(decision).map_err(|e| PolicyError::Protocol(format!("bad {kind:?} decision: {e}")))
    }
}

impl AgentPolicy for ExternalPolicy {
    fn name(&self) -> &str {
        &self.label
    }

    fn decide_bids(&mut self, obs: &BidObservation, ctx: &mut DecisionContext<'_>) -> Result<Vec<BidDecision>, PolicyError> {
        let reply: BidsReply = self.call(RequestKind::Bid, obs.self_view.agent_id, obs, ctx)?;
        Ok(reply.bids)
    }

    fn decide_selection(
        &mut self,
        obs: &SelectionObservation,
        ctx: &mut DecisionContext<'_>,
    ) -> Result<Selection, PolicyError> {
        let reply: SelectReply = self.call(RequestKind::Select, obs.self_view.agent_id, obs, ctx)?;
        Ok(reply.winner.map_or(Selection::RejectAll, Selection::Winner))
    }

    fn decide_plan(&mut self, obs: &PlanObservation, ctx: &mut DecisionContext<'_>) -> Result<ExecutionPlan, PolicyError> {
        self.call(RequestKind::Plan, obs.self_view.agent_id, obs, ctx)
    }

    fn decide_payment(&mut self, obs: &PaymentObservation, ctx: &mut DecisionContext<'_>) -> Result<f64, PolicyError> {
        let reply: PayReply = self.call(RequestKind::Pay, obs.self_view.agent_id, obs, ctx)?;
        if !reply.rho.is_finite() {
            return Err(PolicyError::Protocol("rho is not finite".into()));
        }
        Ok(reply.rho)
    }

    fn update_belief(&mut self, obs: &BeliefObservation, ctx: &mut DecisionContext<'_>) -> Result<String, PolicyError> {
        let reply: BeliefReply = self.call(RequestKind::Belief, obs.self_view.agent_id, obs, ctx)?;
        Ok(reply.belief)
    }

    fn decide_autarky(
        &mut self,
        obs: &AutarkyObservation,
        ctx: &mut DecisionContext<'_>,
    ) -> Result<Option<ExecutionPlan>, PolicyError> {
        let reply: AutarkyReply = self.call(RequestKind::Autarky, obs.self_view.agent_id, obs, ctx)?;
        Ok(reply.plan)
    }

    fn offspring(&self) -> Box<dyn AgentPolicy> {
        Box::new(Self { conn: Arc::clone(&self.conn), label: self.label.clone() })
    }
}

/// How the reference agent misbehaves, for exercising engine fallbacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReferenceBehaviour {
    #[default]
    Cooperative,
    /// Never bids, otherwise cooperative.
    NoBid,
    /// Answers every request with a line that is not a decision.
    Malformed,
    /// Reads requests and never answers.
    Silent,
}

/// Per-connection statistics from a reference agent session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReferenceStats {
    pub requests: usize,
    pub queries_sent: usize,
    pub answers: usize,
    pub rounds_seen: u32,
}

fn decide_reference(request: &Request) -> Value {
    let obs = &request.observation;
    let skill = obs["self_view"]["skill"].as_str().unwrap_or_default().to_string();
    match request.kind {
        RequestKind::Bid => {
            let bids: Vec<Value> = obs["listings"]
                .as_array()
                .into_iter()
                .flatten()
                .filter(|l| l["task"]["domain"].as_str() == Some(skill.as_str()))
                .take(3)
                .map(|l| {
                    let reward = l["reward"].as_f64().unwrap_or(0.0);
                    json!({ "listing_id": l["listing_id"], "price": 0.6 * reward, "proposal": "approach: mid/skills/60% of reward" })
                })
                .collect();
            json!({ "bids": bids })
        }
        RequestKind::Select => {
            let winner = obs["bids"]
                .as_array()
                .into_iter()
                .flatten()
                .min_by(|a, b| {
                    let pa = a["price"].as_f64().unwrap_or(f64::INFINITY);
                    let pb = b["price"].as_f64().unwrap_or(f64::INFINITY);
                    pa.total_cmp(&pb).then(a["bidder"].as_u64().cmp(&b["bidder"].as_u64()))
                })
                .map(|b| b["bidder"].clone());
            json!({ "winner": winner })
        }
        RequestKind::Plan => {
            let matched = obs["contract"]["listing"]["task"]["domain"].as_str() == Some(skill.as_str());
            let skills = if matched { vec![format!("{skill}/docs")] } else { Vec::new() };
            json!({ "tier": Tier::Mid, "skills": skills })
        }
        RequestKind::Pay => json!({ "rho": 0.9 }),
        RequestKind::Belief => {
            json!({ "belief": format!("round {}: wealth {:.4}", obs["round"], obs["self_view"]["wealth"].as_f64().unwrap_or(0.0)) })
        }
        RequestKind::Autarky => json!({ "plan": { "tier": "mid", "skills": [] } }),
    }
}

/// A small rule-based agent speaking the wire protocol: bids 60% of the
/// reward on listings in its own domain, picks the cheapest bid and pays
/// 0.9. Before each bid it checks its balance through the query channel.
/// Runs until the engine closes the stream.
pub fn run_reference_agent(
    reader: impl BufRead,
    mut writer: impl Write,
    behaviour: ReferenceBehaviour,
) -> io::Result<ReferenceStats> {
    let mut stats = ReferenceStats::default();
    let mut lines = reader.lines();
    while let Some(line) = lines.next() {
        let line = line?;
        let Ok(request) = serde_json::from_str::<Request>(&line) else {
            // query answers and unrelated chatter
            continue;
        };
        stats.requests += 1;
        if let Some(round) = request.observation["round"].as_u64() {
            stats.rounds_seen = stats.rounds_seen.max(round as u32);
        }
        match behaviour {
            ReferenceBehaviour::Silent => continue,
            ReferenceBehaviour::Malformed => {
                writeln!(writer, "{{\"id\": {}, \"decison\": oops", request.id)?;
                writer.flush()?;
                continue;
            }
            _ => {}
        }
        if request.kind == RequestKind::Bid {
            let query = json!({ "id": request.id, "query": "check_balance", "agent_id": request.agent_id });
            writeln!(writer, "{query}")?;
            writer.flush()?;
            stats.queries_sent += 1;
            match lines.next() {
                Some(answer) => {
                    let answer: Value = serde_json::from_str(&answer?).unwrap_or(Value::Null);
                    if answer.get("answer").is_some() {
                        stats.answers += 1;
                    }
                }
                None => break,
            }
        }
        let decision = if behaviour == ReferenceBehaviour::NoBid && request.kind == RequestKind::Bid {
            json!({ "bids": [] })
        } else {
            decide_reference(&request)
        };
        writeln!(writer, "{}", json!({ "id": request.id, "decision": decision }))?;
        writer.flush()?;
    }
    Ok(stats)
}
