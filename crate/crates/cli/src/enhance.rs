use photoloop_client::{Client, ClientError};
use photoloop_core::api::{EventKind, ParamsPatch};
use photoloop_core::optimizer::{IterationRecord, ParamEdit, StopReason};
use photoloop_core::session::{Session, SessionOptions};
use photoloop_core::{AbnConfig, AbnReport, ParamVector};
use serde::Serialize;

use crate::{print_json, read_input, write_output, EnhanceArgs, Failure};

#[derive(Serialize)]
struct EnhanceReport {
    k: ParamVector,
    initial_mean_score: f64,
    final_mean_score: f64,
    loss_trace: Vec<f64>,
    iterations: usize,
    stop_reason: Option<StopReason>,
    abn_report: AbnReport,
}

impl EnhanceReport {
    fn new(k: ParamVector, history: &[IterationRecord], stop_reason: Option<StopReason>, abn_report: AbnReport) -> Self {
        EnhanceReport {
            k,
            initial_mean_score: history.first().map_or(f64::NAN, |r| r.mean_score),
            final_mean_score: history.last().map_or(f64::NAN, |r| r.mean_score),
            loss_trace: history.iter().map(|r| r.loss).collect(),
            iterations: history.len().saturating_sub(1),
            stop_reason,
            abn_report,
        }
    }
}

fn edit(args: &EnhanceArgs) -> ParamEdit {
    ParamEdit {
        set: args.set.clone(),
        fix: args.fix.clone(),
        ..ParamEdit::default()
    }
}

pub fn run(args: &EnhanceArgs) -> Result<(), Failure> {
    let bytes = read_input(&args.input)?;
    if let Some(url) = &args.server {
        return remote(args, url, bytes);
    }
    let mut options = SessionOptions {
        abn: !args.no_abn,
        abn_config: AbnConfig { seed: args.seed, ..AbnConfig::default() },
        assessor: args.assessor.clone(),
        ..SessionOptions::default()
    };
    if let Some(gamma) = args.gamma {
        options.optimizer.gamma = gamma;
    }
    let mut session = Session::create("cli", &bytes, options)?;
    session.set_params(&edit(args))?;
    let reason = session.optimize(args.steps, |_, _| {})?;
    write_output(&args.output, &session.render()?)?;
    print_json(&EnhanceReport::new(
        *session.params(),
        session.history(),
        Some(reason),
        session.abn_report().clone(),
    ))
}

fn client_failure(e: ClientError) -> Failure {
    let code = match &e {
        ClientError::Api { status, message } => match status.as_u16() {
            415 => 1,
            400 if message.contains("empty input") => 1,
            400 | 404 | 409 | 422 => 4,
            _ => 2,
        },
        ClientError::Url(_) => 4,
        _ => 3,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

fn remote(args: &EnhanceArgs, url: &str, bytes: Vec<u8>) -> Result<(), Failure> {
    if args.assessor != photoloop_core::AssessorKind::Proxy {
        return Err(Failure {
            code: 4,
            message: "--assessor is configured on the server; omit it with --server".into(),
        });
    }
    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::io("cannot start runtime", e))?;
    runtime.block_on(async {
        let client = Client::new(url).map_err(client_failure)?;
        let created = client.create_session(bytes, !args.no_abn).await.map_err(client_failure)?;
        let id = created.id;
        let patch = ParamsPatch {
            set: args.set.iter().map(|(id, v)| (id.name().to_string(), *v)).collect(),
            fix: args.fix.iter().map(|id| id.name().to_string()).collect(),
            unfix: vec![],
            gamma: args.gamma,
        };
        if patch != ParamsPatch::default() {
            client.set_params(&id, &patch).await.map_err(client_failure)?;
        }
        let run = client.optimize(&id, args.steps).await.map_err(client_failure)?;
        let events = client.wait_for_run(&id, run.events_after).await.map_err(client_failure)?;
        let reason = events.iter().rev().find_map(|e| match &e.kind {
            EventKind::StatusChanged { reason, .. } => *reason,
            _ => None,
        });
        let state = client.session(&id).await.map_err(client_failure)?;
        if let photoloop_core::Status::Error(msg) = &state.status {
            return Err(Failure {
                code: 2,
                message: msg.clone(),
            });
        }
        let png = client.render(&id).await.map_err(client_failure)?;
        write_output(&args.output, &png)?;
        print_json(&EnhanceReport::new(state.k, &state.history, reason, state.abn_report))
    })
}
