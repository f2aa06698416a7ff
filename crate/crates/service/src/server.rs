//! Live session bridge.
//!
//! One actor task owns the [`ProtocolMachine`] and the archive writer and
//! handles commands strictly in arrival order. A ticker publishes the
//! latest state at `tick_hz`; observers that fall behind lose the oldest
//! broadcasts, while operator input and the archive are never dropped.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use reachmap::bias_profile::build_profile;
use reachmap::map_compiler::compile_stack;
use reachmap::session_store::{SessionRecorder, TrialSummary};
use reachmap::task::{MachineState, ProtocolMachine, SessionSink};
use reachmap::{BiasProfile, Config, ControlSample, RemapStack};
use serde::Deserialize;
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use crate::config::ServiceConfig;
use crate::protocol::{
    ClientMessage, CompileState, ControlAction, ErrorCode, ServerMessage, StateMessage,
};

const COMMAND_QUEUE: usize = 4096;
const BROADCAST_QUEUE: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Operator,
    #[default]
    Observer,
}

#[derive(Debug, Deserialize)]
struct ConnectParams {
    #[serde(default)]
    role: Role,
}

type Reply = mpsc::UnboundedSender<Arc<str>>;

enum Command {
    Input(ControlSample, Reply),
    Control {
        action: ControlAction,
        condition: Option<reachmap::Condition>,
        reply: Reply,
    },
    Snapshot {
        with_hulls: bool,
        reply: oneshot::Sender<ServerMessage>,
    },
    Calibrated(Result<(BiasProfile, RemapStack, reachmap::map_compiler::CompileReport), String>),
    /// Flush an unfinished archive and stop.
    Stop(oneshot::Sender<()>),
}

#[derive(Clone)]
struct AppState {
    commands: mpsc::Sender<Command>,
    events: broadcast::Sender<Arc<str>>,
    operator_taken: Arc<AtomicBool>,
}

/// A running server.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    commands: mpsc::Sender<Command>,
    server: JoinHandle<std::io::Result<()>>,
    finished: watch::Receiver<bool>,
}

impl ServiceHandle {
    /// Resolves once the session reaches its end and the archive is closed.
    pub async fn session_finished(&mut self) {
        let _ = self.finished.wait_for(|f| *f).await;
    }

    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let served = self.server.await.map_err(std::io::Error::other)?;
        let (tx, rx) = oneshot::channel();
        if self.commands.send(Command::Stop(tx)).await.is_ok() {
            let _ = rx.await;
        }
        served
    }
}

/// Binds the listener and starts the session; returns once accepting.
pub async fn spawn(config: ServiceConfig) -> std::io::Result<ServiceHandle> {
    let recorder = match &config.archive_dir {
        Some(dir) => Some(
            SessionRecorder::create(dir, config.seed, &config.engine, "live").map_err(std::io::Error::other)?,
        ),
        None => None,
    };
    let machine = ProtocolMachine::new(config.engine.clone(), config.seed);
    let (commands, command_rx) = mpsc::channel(COMMAND_QUEUE);
    let (events, _) = broadcast::channel(BROADCAST_QUEUE);
    let (latest_tx, latest_rx) = watch::channel(state_message(&machine));
    let (finished_tx, finished) = watch::channel(false);

    let actor = Actor {
        machine,
        recorder,
        discard: (),
        commands: commands.clone(),
        events: events.clone(),
        latest: latest_tx,
        finished: finished_tx,
        compiling: false,
        input_notice_sent: false,
    };
    tokio::spawn(actor.run(command_rx));
    tokio::spawn(ticker(latest_rx, events.clone(), config.tick_hz));

    let state = AppState {
        commands: commands.clone(),
        events,
        operator_taken: Arc::new(AtomicBool::new(false)),
    };
    let app = Router::new()
        .route("/ws", get(ws_handler))
        .route("/health", get(|| async { "ok" }))
        .with_state(state);

    let listener = tokio::net::TcpListener::bind(config.addr()).await?;
    let addr = listener.local_addr()?;
    let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = shutdown_rx.await;
            })
            .await
    });
    log::info!("listening on ws://{addr}/ws");
    Ok(ServiceHandle {
        addr,
        shutdown: Some(shutdown_tx),
        commands,
        server,
        finished,
    })
}

/// Runs until interrupted.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let handle = spawn(config).await?;
    tokio::signal::ctrl_c().await?;
    log::info!("shutting down");
    handle.shutdown().await
}

fn state_message(machine: &ProtocolMachine) -> StateMessage {
    let plan = machine.plan();
    let phase = machine.phase();
    let runner = machine.runner();
    let deployment = machine.deployment();
    StateMessage {
        seq: 0,
        machine: machine.state(),
        phase,
        condition: phase.map(|p| p.condition()),
        trial_index: machine.trial_index(),
        trials_in_phase: phase.map_or(0, |p| plan.targets(p).len()),
        target: runner.map(|r| *r.target()),
        dot: runner.map(|r| r.dot()).unwrap_or_default(),
        hold_progress: runner.map_or(0.0, |r| r.hold_progress()),
        countdown: runner.map(|r| (machine.config().trial_timeout - r.elapsed()).max(0.0)),
        alpha: deployment.as_ref().map_or(0.0, |d| d.alpha),
        frequency: deployment.as_ref().map_or(0.0, |d| d.frequency),
        active_bin: deployment.as_ref().and_then(|d| d.active_bin),
        last_input_t: deployment.as_ref().and_then(|d| d.last_t),
    }
}

struct Actor {
    machine: ProtocolMachine,
    recorder: Option<SessionRecorder>,
    discard: (),
    commands: mpsc::Sender<Command>,
    events: broadcast::Sender<Arc<str>>,
    latest: watch::Sender<StateMessage>,
    finished: watch::Sender<bool>,
    compiling: bool,
    input_notice_sent: bool,
}

fn send(reply: &Reply, msg: &ServerMessage) {
    let _ = reply.send(msg.to_text().into());
}

impl Actor {
    async fn run(mut self, mut rx: mpsc::Receiver<Command>) {
        while let Some(cmd) = rx.recv().await {
            if let Command::Stop(done) = cmd {
                if let Some(rec) = self.recorder.as_mut() {
                    if let Err(e) = rec.flush() {
                        log::error!("flushing archive failed: {e}");
                    }
                }
                let _ = done.send(());
                return;
            }
            self.handle(cmd);
            self.latest.send_replace(state_message(&self.machine));
            if self.machine.state() == MachineState::Finished {
                self.finish();
            }
        }
    }

    fn sink<'a>(recorder: &'a mut Option<SessionRecorder>, discard: &'a mut ()) -> &'a mut dyn SessionSink {
        match recorder {
            Some(r) => r,
            None => discard,
        }
    }

    fn broadcast(&self, msg: &ServerMessage) {
        let _ = self.events.send(msg.to_text().into());
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Input(sample, reply) => self.input(sample, &reply),
            Command::Control {
                action,
                condition,
                reply,
            } => match self.control(action, condition) {
                Ok(()) => send(&reply, &ServerMessage::Ack { action }),
                Err(e) => send(&reply, &e),
            },
            Command::Snapshot { with_hulls, reply } => {
                let _ = reply.send(self.snapshot(with_hulls));
            }
            Command::Calibrated(result) => self.calibrated(result),
            Command::Stop(_) => unreachable!("handled by the run loop"),
        }
    }

    fn input(&mut self, sample: ControlSample, reply: &Reply) {
        if self.machine.state() != MachineState::Running {
            // One notice per idle stretch; a streaming device keeps sending.
            if !self.input_notice_sent {
                self.input_notice_sent = true;
                send(
                    reply,
                    &ServerMessage::error(
                        ErrorCode::OutOfPhase,
                        format!("input discarded while {}", self.machine.state()),
                    ),
                );
            }
            return;
        }
        let sink = Self::sink(&mut self.recorder, &mut self.discard);
        match self.machine.push_sample(&sample, sink) {
            Ok(step) => {
                if let Some(record) = step.finished {
                    self.broadcast(&ServerMessage::TrialResult {
                        trial: TrialSummary::from(&record),
                    });
                }
                if self.machine.state() != MachineState::Running {
                    self.input_notice_sent = false;
                }
                if self.machine.state() == MachineState::Calibrating {
                    self.start_compile();
                }
            }
            Err(e) => {
                log::error!("sample rejected: {e}");
                send(reply, &ServerMessage::error(ErrorCode::Internal, e.to_string()));
            }
        }
    }

    fn control(&mut self, action: ControlAction, condition: Option<reachmap::Condition>) -> Result<(), ServerMessage> {
        let out_of_phase = |e: reachmap::error::TaskError| match e {
            reachmap::error::TaskError::OutOfPhase { .. } => ServerMessage::error(ErrorCode::OutOfPhase, e.to_string()),
            other => ServerMessage::error(ErrorCode::Internal, other.to_string()),
        };
        let sink = Self::sink(&mut self.recorder, &mut self.discard);
        match action {
            ControlAction::StartPhase => self.machine.start_phase(sink).map(drop).map_err(out_of_phase),
            ControlAction::Resume => self.machine.resume(sink).map(drop).map_err(out_of_phase),
            ControlAction::Break => self.machine.request_break().map_err(out_of_phase),
            ControlAction::SetCondition => {
                let c = condition.ok_or_else(|| ServerMessage::error(ErrorCode::Malformed, "set-condition needs `condition`"))?;
                self.machine.set_next_condition(c).map_err(out_of_phase)
            }
        }?;
        self.input_notice_sent = false;
        Ok(())
    }

    fn snapshot(&self, with_hulls: bool) -> ServerMessage {
        let mut trials: Vec<TrialSummary> = self
            .machine
            .completed_phases()
            .iter()
            .flat_map(|p| p.trials.iter().map(TrialSummary::from))
            .collect();
        if let Some(p) = self.machine.current_phase() {
            trials.extend(p.trials.iter().map(TrialSummary::from));
        }
        let hulls = match (with_hulls, self.machine.profile()) {
            (true, Some(profile)) => profile
                .bins
                .iter()
                .map(|b| b.hull.vertices().iter().map(|v| [v.x, v.y]).collect())
                .collect(),
            _ => Vec::new(),
        };
        ServerMessage::Snapshot {
            state: self.latest.borrow().clone(),
            phases: self.machine.plan().phases.clone(),
            trials,
            hulls,
        }
    }

    fn start_compile(&mut self) {
        if self.compiling {
            return;
        }
        self.compiling = true;
        let stream = self.machine.calibration_stream().to_vec();
        let config: Config = self.machine.config().clone();
        let events = self.events.clone();
        let commands = self.commands.clone();
        let publish = move |msg: ServerMessage| {
            let _ = events.send(msg.to_text().into());
        };
        publish(ServerMessage::CompileStatus {
            status: CompileState::Started,
            elapsed_ms: None,
            profile_hash: None,
            message: None,
        });
        tokio::task::spawn_blocking(move || {
            let started = Instant::now();
            let samples = stream.len();
            let progress = |stage: &str, fraction: f64| ServerMessage::CalibrationProgress {
                stage: stage.into(),
                fraction,
                samples,
            };
            publish(progress("profile", 0.0));
            let result = build_profile(&stream, &config)
                .map_err(|e| e.to_string())
                .and_then(|profile| {
                    publish(progress("compile", 0.5));
                    compile_stack(&profile, &config)
                        .map(|(stack, report)| (profile, stack, report))
                        .map_err(|e| e.to_string())
                });
            let elapsed_ms = Some(started.elapsed().as_secs_f64() * 1e3);
            match &result {
                Ok((_, stack, _)) => {
                    publish(progress("done", 1.0));
                    publish(ServerMessage::CompileStatus {
                        status: CompileState::Done,
                        elapsed_ms,
                        profile_hash: Some(stack.profile_hash_hex()),
                        message: None,
                    });
                }
                Err(e) => publish(ServerMessage::CompileStatus {
                    status: CompileState::Failed,
                    elapsed_ms,
                    profile_hash: None,
                    message: Some(e.clone()),
                }),
            }
            let _ = commands.blocking_send(Command::Calibrated(result));
        });
    }

    fn calibrated(&mut self, result: Result<(BiasProfile, RemapStack, reachmap::map_compiler::CompileReport), String>) {
        self.compiling = false;
        match result {
            Ok((profile, stack, report)) => {
                let sink = Self::sink(&mut self.recorder, &mut self.discard);
                if let Err(e) = self.machine.install_calibration(profile, Arc::new(stack), report, sink) {
                    log::error!("installing calibration failed: {e}");
                }
            }
            Err(e) => log::error!("calibration failed, session stays in calibration: {e}"),
        }
    }

    fn finish(&mut self) {
        if let Some(rec) = self.recorder.take() {
            match rec.finish() {
                Ok(m) => log::info!("archive complete with {} phases", m.phases.len()),
                Err(e) => log::error!("closing archive failed: {e}"),
            }
        }
        self.finished.send_replace(true);
    }
}

async fn ticker(mut latest: watch::Receiver<StateMessage>, events: broadcast::Sender<Arc<str>>, hz: f64) {
    let mut interval = tokio::time::interval(Duration::from_secs_f64(1.0 / hz));
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let mut seq = 0u64;
    loop {
        interval.tick().await;
        if latest.has_changed().is_err() {
            return;
        }
        let mut state = latest.borrow_and_update().clone();
        seq += 1;
        state.seq = seq;
        let _ = events.send(ServerMessage::State(state).to_text().into());
    }
}

async fn ws_handler(
    ws: WebSocketUpgrade,
    Query(params): Query<ConnectParams>,
    State(state): State<AppState>,
) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, params.role, state))
}

async fn connection(socket: WebSocket, role: Role, state: AppState) {
    let (mut tx, mut rx) = socket.split();
    let text = |s: &str| Message::Text(Utf8Bytes::from(s));

    if role == Role::Operator && state.operator_taken.swap(true, Ordering::AcqRel) {
        let msg = ServerMessage::error(ErrorCode::OperatorTaken, "an operator is already connected");
        let _ = tx.send(text(&msg.to_text())).await;
        let _ = tx.close().await;
        return;
    }

    // Subscribing first means nothing between the snapshot and the first
    // broadcast is missed.
    let mut events = state.events.subscribe();
    let (snap_tx, snap_rx) = oneshot::channel();
    let snapshot = async {
        state
            .commands
            .send(Command::Snapshot {
                with_hulls: role == Role::Observer,
                reply: snap_tx,
            })
            .await
            .ok()?;
        snap_rx.await.ok()
    };
    match snapshot.await {
        Some(s) => {
            if tx.send(text(&s.to_text())).await.is_err() {
                release(role, &state);
                return;
            }
        }
        None => {
            release(role, &state);
            return;
        }
    }

    let (reply_tx, mut reply_rx) = mpsc::unbounded_channel::<Arc<str>>();
    let writer = tokio::spawn(async move {
        loop {
            let frame = tokio::select! {
                biased;
                r = reply_rx.recv() => match r {
                    Some(f) => f,
                    None => break,
                },
                e = events.recv() => match e {
                    Ok(f) => f,
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        log::debug!("slow client skipped {n} broadcasts");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
            };
            if tx.send(Message::Text(Utf8Bytes::from(&*frame))).await.is_err() {
                break;
            }
        }
        let _ = tx.close().await;
    });

    while let Some(Ok(msg)) = rx.next().await {
        let body = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Binary(_) => {
                send(&reply_tx, &ServerMessage::error(ErrorCode::Malformed, "binary frames are not accepted"));
                continue;
            }
            _ => continue,
        };
        let parsed = match ClientMessage::parse(body.as_str()) {
            Ok(m) => m,
            Err(e) => {
                send(&reply_tx, &e);
                continue;
            }
        };
        if role != Role::Operator {
            send(&reply_tx, &ServerMessage::error(ErrorCode::Forbidden, "observers cannot send input or control"));
            continue;
        }
        let cmd = match parsed {
            ClientMessage::Input { t, x, y, z } => Command::Input(ControlSample::new(t, x, y, z), reply_tx.clone()),
            ClientMessage::Control { action, condition } => Command::Control {
                action,
                condition,
                reply: reply_tx.clone(),
            },
        };
        if state.commands.send(cmd).await.is_err() {
            break;
        }
    }
    drop(reply_tx);
    writer.abort();
    release(role, &state);
}

fn release(role: Role, state: &AppState) {
    if role == Role::Operator {
        state.operator_taken.store(false, Ordering::Release);
    }
}
