//! Starts the bridge on a free port and drives the training round in real
//! time with a synthetic operator that only sees the broadcast state.
//!
//!     cargo run --example live_service -p reachmap-service

use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use reachmap::task::{MachineState, Operator, Preset, SyntheticUser, TaskView};
use reachmap::Config;
use reachmap_service::protocol::{ClientMessage, ControlAction, ServerMessage};
use reachmap_service::{spawn, ServiceConfig};
use tokio_tungstenite::connect_async;
use tokio_tungstenite::tungstenite::Message;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let engine = Config {
        training_targets: 3,
        trial_timeout: 10.0,
        ..Config::default()
    };
    let handle = spawn(ServiceConfig {
        port: 0,
        seed: 3,
        engine: engine.clone(),
        ..ServiceConfig::default()
    })
    .await?;
    println!("serving on ws://{}/ws", handle.addr);

    let (ws, _) = connect_async(format!("ws://{}/ws?role=operator", handle.addr)).await?;
    let (mut tx, mut rx) = ws.split();
    tx.send(Message::text(
        ClientMessage::Control {
            action: ControlAction::StartPhase,
            condition: None,
        }
        .to_text(),
    ))
    .await?;

    let mut user = SyntheticUser::preset(Preset::Contraction, 3, engine.input_rate);
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(engine.frame_dt()));
    let mut view: Option<TaskView> = None;
    let mut current = None;
    let mut done = 0;
    while done < engine.training_targets {
        tokio::select! {
            frame = rx.next() => {
                let Some(Ok(Message::Text(text))) = frame else { break };
                match ServerMessage::parse(text.as_str()) {
                    Ok(ServerMessage::State(s)) if s.machine == MachineState::Running => {
                        let target = s.target.expect("running trial has a target");
                        if current != Some(target.order) {
                            current = Some(target.order);
                            user.begin_trial(&target);
                        }
                        view = Some(TaskView { target, dot: s.dot, elapsed: 0.0 });
                    }
                    Ok(ServerMessage::TrialResult { trial }) => {
                        done += 1;
                        println!(
                            "trial {} target ({:+.1}, {:+.1}, {:+.1}): {:?} after {:.2} s",
                            trial.target.order, trial.target.x, trial.target.y, trial.target.z,
                            trial.outcome, trial.duration
                        );
                    }
                    Ok(ServerMessage::Error { code, message }) => println!("error {code:?}: {message}"),
                    _ => {}
                }
            }
            _ = ticker.tick() => {
                if let Some(v) = &view {
                    if let Some(s) = user.next_sample(v) {
                        let msg = ClientMessage::Input { t: s.t, x: s.u_x, y: s.u_y, z: s.u_z };
                        tx.send(Message::text(msg.to_text())).await?;
                    }
                }
            }
        }
    }
    handle.shutdown().await?;
    Ok(())
}
