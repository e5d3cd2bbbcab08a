//! The `arena` command-line client. Every command except `init` is a thin
//! wrapper over one HTTP route.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 error reported by the
//! server, 3 downloaded data does not match its digest, 4 server unreachable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reqwest::blocking::{Client, RequestBuilder};
use serde_json::{json, Value};

use crate::clock::SystemClock;
use crate::config::load_config_file;
use crate::formats::parse_table;
use crate::fsutil::{atomic_write, sha256_hex};
use crate::platform::{Arena, ArenaOptions};
use crate::server::{router, serve, CHANNEL_HEADER, DIGEST_HEADER};
use crate::verification::PolicyVerifier;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_SERVER: i32 = 2;
pub const EXIT_DIGEST: i32 = 3;
pub const EXIT_CONNECTION: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "arena", version, about = "Competition server and client")]
pub struct Cli {
    /// Base URL of the competition server.
    #[arg(long, global = true, env = "ARENA_SERVER", default_value = "http://127.0.0.1:8080")]
    pub server: String,
    /// File holding the team credential. `ARENA_CREDENTIAL` takes precedence.
    #[arg(long, global = true, env = "ARENA_CREDENTIAL_FILE")]
    pub credential_file: Option<PathBuf>,
    /// File holding the organizer token, for organizer commands.
    #[arg(long, global = true, env = "ARENA_ORGANIZER_TOKEN_FILE")]
    pub organizer_token_file: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Output::Text)]
    pub output: Output,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Output {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a competition config and start the server.
    Init(InitArgs),
    /// Freeze the live leaderboard of a stage under a label.
    Freeze { stage: String, label: String },
    /// Move a stage to the next evaluator version.
    Twist {
        stage: String,
        version: u32,
        /// Label for the automatic freeze; `<stage>-v<current>` by default.
        #[arg(long)]
        label: Option<String>,
    },
    /// Run every pending verification of a stage now, then aggregate.
    VerifyDrain { stage: String },
    /// Download the full audit bundle of a stage.
    Export {
        stage: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grant a manual badge to the team shown as `display_name`.
    GrantBadge { stage: String, badge: String, display_name: String },
    /// Reactivate the team that has member `email`.
    Reinstate { email: String },
    /// Verification backlog and published boards per stage.
    QueueStatus,
    /// Register a team.
    Register(RegisterArgs),
    /// Competition data files.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Submit a payload file to a stage.
    Submit {
        stage: String,
        file: PathBuf,
        #[arg(long)]
        channel: Option<String>,
    },
    /// Show today's remaining submissions.
    Quota { stage: String },
    /// Show the status of one of your submissions.
    Status { stage: String, id: String },
    /// Print a leaderboard as a table.
    Board {
        stage: String,
        #[arg(long)]
        frozen: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(env = "ARENA_CONFIG")]
    pub config: PathBuf,
    #[arg(long, env = "ARENA_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long = "bind", env = "ARENA_BIND_ADDR", default_value = "127.0.0.1:8080")]
    pub bind_addr: String,
    /// Root of the scanned submission directory; `<data>/inbox` by default.
    #[arg(long, env = "ARENA_SCAN_ROOT")]
    pub scan_root: Option<PathBuf>,
    /// Static files served under `/ui/`; `<data>/ui` by default.
    #[arg(long, env = "ARENA_UI_DIR")]
    pub ui_dir: Option<PathBuf>,
    /// Validate only.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// `Name <email>`, once per member.
    #[arg(long = "member", required = true, value_parser = parse_member)]
    pub members: Vec<(String, String)>,
    /// `stage=token`, once per stage.
    #[arg(long = "token", required = true, value_parser = parse_token)]
    pub tokens: Vec<(String, String)>,
    #[arg(long)]
    pub accept_rules: bool,
    /// Write the issued credential here (created with mode 0600).
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Download a file and check it against the published digest.
    Pull {
        file: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_member(s: &str) -> Result<(String, String), String> {
    let (name, rest) = s.split_once('<').ok_or("expected `Name <email>`")?;
    let email = rest.strip_suffix('>').ok_or("expected `Name <email>`")?;
    Ok((name.trim().to_string(), email.trim().to_string()))
}

fn parse_token(s: &str) -> Result<(String, String), String> {
    let (stage, token) = s.split_once('=').ok_or("expected `stage=token`")?;
    Ok((stage.to_string(), token.to_string()))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("server returned {status}: {message}")]
    Server { status: u16, message: String, body: Value },
    #[error("{0}")]
    Digest(String),
    #[error("cannot reach server: {0}")]
    Connection(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Server { .. } => EXIT_SERVER,
            CliError::Digest(_) => EXIT_DIGEST,
            CliError::Connection(_) => EXIT_CONNECTION,
        }
    }

    fn to_json(&self) -> Value {
        let mut v = match self {
            CliError::Server { status, body, .. } => {
                let mut b = if body.is_object() { body.clone() } else { json!({}) };
                b["status"] = json!(status);
                b
            }
            _ => json!({}),
        };
        v["error"] = json!(self.to_string());
        v["exit_code"] = json!(self.exit_code());
        v
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses arguments, runs, prints, and returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let output = cli.output;
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            match output {
                Output::Text => eprintln!("error: {e}"),
                Output::Json => println!("{}", e.to_json()),
            }
            e.exit_code()
        }
    }
}

struct Remote {
    client: Client,
    base: String,
}

impl Remote {
    fn new(server: &str) -> CliResult<Self> {
        let client = Client::builder().timeout(std::time::Duration::from_secs(600)).build().map_err(usage)?;
        Ok(Self { client, base: server.trim_end_matches('/').to_string() })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, req: RequestBuilder) -> CliResult<reqwest::blocking::Response> {
        let resp = req.send().map_err(|e| CliError::Connection(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().unwrap_or_default();
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        let message = body["error"].as_str().map(str::to_string).unwrap_or(text);
        Err(CliError::Server { status, message, body })
    }

    fn json(&self, req: RequestBuilder) -> CliResult<Value> {
        self.send(req)?.json().map_err(|e| CliError::Connection(e.to_string()))
    }
}

fn read_secret(path: &Path) -> CliResult<String> {
    let s = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(s.trim().to_string())
}

fn credential(cli: &Cli) -> CliResult<String> {
    if let Ok(c) = std::env::var("ARENA_CREDENTIAL") {
        if !c.trim().is_empty() {
            return Ok(c.trim().to_string());
        }
    }
    match &cli.credential_file {
        Some(p) => read_secret(p),
        None => Err(usage("no credential: set ARENA_CREDENTIAL or pass --credential-file")),
    }
}

fn organizer_token(cli: &Cli) -> CliResult<String> {
    match &cli.organizer_token_file {
        Some(p) => read_secret(p),
        None => Err(usage("organizer commands need --organizer-token-file or ARENA_ORGANIZER_TOKEN_FILE")),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Command::Init(args) = &cli.command {
        return init(args, cli.organizer_token_file.as_deref(), cli.output);
    }
    let remote = Remote::new(&cli.server)?;
    let out = cli.output;
    let admin = |action: &str, body: Value| -> CliResult<Value> {
        let token = organizer_token(&cli)?;
        remote.json(remote.client.post(remote.url(&format!("/api/admin/{action}"))).bearer_auth(token).json(&body))
    };
    match &cli.command {
        Command::Init(_) => unreachable!("handled above"),
        Command::Freeze { stage, label } => {
            let v = admin("freeze", json!({ "stage_id": stage, "label": label }))?;
            emit(out, &v, || {
                format!("froze {stage} as \"{label}\" (snapshot {})", v["frozen"]["snapshot_id"])
            });
        }
        Command::Twist { stage, version, label } => {
            let v = admin("twist", json!({ "stage_id": stage, "version": version, "label": label }))?;
            emit(out, &v, || {
                let mut s = format!("{stage}: evaluator v{} -> v{}\n", v["from_version"], v["to_version"]);
                match v["frozen"].as_object() {
                    Some(f) => writeln!(s, "froze previous board as \"{}\" (snapshot {})", f["label"].as_str().unwrap_or(""), f["snapshot_id"]),
                    None => writeln!(s, "no live board to freeze"),
                }
                .expect("write to string");
                write!(s, "re-scored {} submissions ({} format errors)", v["reevaluated"], v["format_errors"])
                    .expect("write to string");
                s
            });
        }
        Command::VerifyDrain { stage } => {
            let v = admin("verify-drain", json!({ "stage_id": stage }))?;
            emit(out, &v, || {
                let p = &v["verification"];
                let c = &v["cycle"];
                format!(
                    "verification: {} completed, {} failed\ncycle: {} verified, {} invalidated",
                    p["completed"], p["failed"], c["verified"], c["invalidated"]
                )
            });
        }
        Command::Export { stage, out: path } => {
            let v = admin("export", json!({ "stage_id": stage }))?;
            let text = serde_json::to_string_pretty(&v).expect("serializes");
            match path {
                Some(p) => {
                    atomic_write(p, text.as_bytes()).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    emit(out, &json!({ "written": p }), || format!("wrote {}", p.display()));
                }
                None => println!("{text}"),
            }
        }
        Command::GrantBadge { stage, badge, display_name } => {
            let v = admin(
                "badge_grant",
                json!({ "stage_id": stage, "badge_id": badge, "display_name": display_name }),
            )?;
            emit(out, &v, || format!("granted {badge} to {}", v["display_name"].as_str().unwrap_or("")));
        }
        Command::Reinstate { email } => {
            let v = admin("reinstate", json!({ "email": email }))?;
            emit(out, &v, || "team reinstated".to_string());
        }
        Command::QueueStatus => {
            let v = admin("queue_status", json!({}))?;
            emit(out, &v, || {
                let mut s = String::new();
                for st in v["stages"].as_array().into_iter().flatten() {
                    writeln!(
                        s,
                        "{}: v{}, {} pending verification, live snapshot {}",
                        st["stage_id"].as_str().unwrap_or(""),
                        st["current_version"],
                        st["verification_pending"],
                        st["live_snapshot"]
                    )
                    .expect("write to string");
                }
                s.trim_end().to_string()
            });
        }
        Command::Register(args) => register(&remote, args, out)?,
        Command::Data { command: DataCommand::Pull { file, out: path } } => {
            let cred = credential(&cli).ok();
            pull(&remote, cred, file, path.as_deref(), out)?;
        }
        Command::Submit { stage, file, channel } => {
            let payload = fs::read(file).map_err(|e| usage(format!("{}: {e}", file.display())))?;
            let mut req =
                remote.client.post(remote.url(&format!("/api/submissions/{stage}"))).bearer_auth(credential(&cli)?).body(payload);
            if let Some(c) = channel {
                req = req.header(CHANNEL_HEADER, c);
            }
            let v = remote.json(req)?;
            emit(out, &v, || {
                let dup = if v["duplicate"] == json!(true) { " (same payload as an earlier submission)" } else { "" };
                format!(
                    "submission {} received at {}{dup}\n{} of {} submissions left today",
                    v["submission_id"].as_str().unwrap_or(""),
                    v["received_at"].as_str().unwrap_or(""),
                    v["quota_remaining"],
                    v["quota_limit"]
                )
            });
        }
        Command::Quota { stage } => {
            let v = remote.json(remote.client.get(remote.url(&format!("/api/quota/{stage}"))).bearer_auth(credential(&cli)?))?;
            emit(out, &v, || {
                format!(
                    "{} of {} used, {} left; resets at {}",
                    v["used"],
                    v["limit"],
                    v["remaining"],
                    v["resets_local"].as_str().unwrap_or("")
                )
            });
        }
        Command::Status { stage, id } => {
            let v = remote.json(
                remote.client.get(remote.url(&format!("/api/submissions/{stage}/{id}"))).bearer_auth(credential(&cli)?),
            )?;
            emit(out, &v, || {
                let state = if let Some(e) = v["format_error"].as_str() {
                    format!("rejected: {e}")
                } else if v["evaluated"] == json!(true) {
                    format!("evaluated (v{}), verification {}", v["evaluator_version"], v["verification"].as_str().unwrap_or("n/a"))
                } else {
                    "waiting for evaluation".to_string()
                };
                format!("{}: {state}", v["submission_id"].as_str().unwrap_or(""))
            });
        }
        Command::Board { stage, frozen } => {
            let mut query = vec![("format", "csv".to_string())];
            if let Some(l) = frozen {
                query.push(("frozen", l.clone()));
            }
            let mut req = remote.client.get(remote.url(&format!("/api/leaderboard/{stage}"))).query(&query);
            if let Some(token) = organizer_token(&cli).ok() {
                req = req.bearer_auth(token);
            }
            let bytes = remote.send(req)?.bytes().map_err(|e| CliError::Connection(e.to_string()))?;
            let (header, rows) = parse_table(&bytes).map_err(|e| usage(format!("unreadable leaderboard: {e}")))?;
            match out {
                Output::Json => {
                    let rows: Vec<BTreeMap<&str, &str>> = rows
                        .iter()
                        .map(|r| header.iter().map(String::as_str).zip(r.iter().map(String::as_str)).collect())
                        .collect();
                    println!("{}", json!({ "stage_id": stage, "rows": rows }));
                }
                Output::Text => print!("{}", render_table(&header, &rows)),
            }
        }
    }
    Ok(())
}

fn emit(out: Output, v: &Value, text: impl FnOnce() -> String) {
    match out {
        Output::Json => println!("{v}"),
        Output::Text => println!("{}", text()),
    }
}

/// Left-aligned text columns, numeric columns right-aligned.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let ncols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(ncols) {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let numeric: Vec<bool> = (0..ncols)
        .map(|i| !rows.is_empty() && rows.iter().all(|r| r.get(i).is_some_and(|c| c.is_empty() || c.parse::<f64>().is_ok())))
        .collect();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = (0..ncols)
            .map(|i| {
                let c = cells.get(i).map_or("", String::as_str);
                if numeric[i] { format!("{c:>w$}", w = widths[i]) } else { format!("{c:<w$}", w = widths[i]) }
            })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    let mut s = String::new();
    line(header, &mut s);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    s.push_str(&rule.join("  "));
    s.push('\n');
    for r in rows {
        line(r, &mut s);
    }
    s
}

fn register(remote: &Remote, args: &RegisterArgs, out: Output) -> CliResult<()> {
    let members: Vec<Value> = args.members.iter().map(|(n, e)| json!({ "name": n, "email": e })).collect();
    let tokens: BTreeMap<&str, &str> = args.tokens.iter().map(|(s, t)| (s.as_str(), t.as_str())).collect();
    let body = json!({ "members": members, "tokens": tokens, "accept_rules": args.accept_rules });
    let v = remote.json(remote.client.post(remote.url("/api/register")).json(&body))?;
    let credential = v["credential"].as_str().unwrap_or("").to_string();
    if let Some(path) = &args.save {
        save_secret(path, &credential).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    emit(out, &v, || {
        let mut s = String::from("registered\n");
        for (stage, token) in v["tokens"].as_object().into_iter().flatten() {
            writeln!(s, "  {stage}: {}", token.as_str().unwrap_or("")).expect("write to string");
        }
        match &args.save {
            Some(p) => write!(s, "credential saved to {}", p.display()),
            None => write!(s, "credential (shown once): {credential}"),
        }
        .expect("write to string");
        s
    });
    Ok(())
}

fn save_secret(path: &Path, secret: &str) -> std::io::Result<()> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create_new(true);
    #[cfg(unix)]
    std::os::unix::fs::OpenOptionsExt::mode(&mut opts, 0o600);
    use std::io::Write;
    let mut f = opts.open(path)?;
    writeln!(f, "{secret}")
}

fn pull(remote: &Remote, credential: Option<String>, file: &str, out_path: Option<&Path>, out: Output) -> CliResult<()> {
    let info = remote.json(remote.client.get(remote.url("/api/competition")))?;
    let manifest = info["data_manifest"]
        .as_array()
        .into_iter()
        .flatten()
        .find(|f| f["file"] == json!(file))
        .and_then(|f| f["sha256"].as_str())
        .map(str::to_string);
    let mut req = remote.client.get(remote.url(&format!("/api/data/{file}")));
    if let Some(c) = credential {
        req = req.bearer_auth(c);
    }
    let resp = remote.send(req)?;
    let header = resp.headers().get(DIGEST_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let bytes = resp.bytes().map_err(|e| CliError::Connection(e.to_string()))?;
    let actual = sha256_hex(&bytes);
    let expected = manifest
        .or(header.clone())
        .ok_or_else(|| CliError::Digest(format!("{file}: server published no digest")))?;
    if actual != expected || header.is_some_and(|h| h != expected) {
        return Err(CliError::Digest(format!("{file}: sha256 {actual} does not match the manifest digest {expected}")));
    }
    let target = out_path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(file));
    atomic_write(&target, &bytes).map_err(|e| usage(format!("{}: {e}", target.display())))?;
    let v = json!({ "file": file, "path": target, "bytes": bytes.len(), "sha256": actual });
    emit(out, &v, || format!("wrote {} ({} bytes, sha256 {actual})", target.display(), bytes.len()));
    Ok(())
}

fn init(args: &InitArgs, token_file: Option<&Path>, out: Output) -> CliResult<()> {
    let competition = load_config_file(&args.config).map_err(|e| usage(format!("{}: {e}", args.config.display())))?;
    let stages: Vec<String> = competition.config.stages.iter().map(|s| s.stage_id.to_string()).collect();
    if args.dry_run {
        let v = json!({ "config": args.config, "competition_id": competition.config.competition_id, "stages": stages });
        emit(out, &v, || format!("config ok: {} ({} stages)", competition.config.competition_id, stages.len()));
        return Ok(());
    }
    let token = match token_file {
        Some(p) => Some(read_secret(p)?).filter(|t| !t.is_empty()),
        None => None,
    };
    if token.is_none() {
        tracing::warn!("no organizer token configured; admin routes will refuse every caller");
    }
    let arena = Arena::open(
        Arc::new(competition),
        ArenaOptions {
            data_dir: args.data_dir.clone(),
            scan_root: args.scan_root.clone(),
            clock: Arc::new(SystemClock),
            verifier: Arc::new(PolicyVerifier),
        },
    )
    .map_err(usage)?;
    arena.check_data_files().map_err(usage)?;
    let arena = Arc::new(arena);
    let ui = args.ui_dir.clone().unwrap_or_else(|| args.data_dir.join("ui"));
    let app = router(arena.clone(), token, Some(ui));
    let rt = tokio::runtime::Runtime::new().map_err(usage)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.bind_addr)
            .await
            .map_err(|e| usage(format!("cannot bind {}: {e}", args.bind_addr)))?;
        let addr = listener.local_addr().map_err(usage)?;
        let v = json!({ "listening": addr.to_string(), "stages": stages });
        emit(out, &v, || format!("listening on http://{addr}"));
        use std::io::Write;
        let _ = std::io::stdout().flush();
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve(listener, arena, app, shutdown).await.map_err(usage)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn members_and_tokens_parse() {
        assert_eq!(parse_member("Ada L <ada@example.org>").unwrap(), ("Ada L".into(), "ada@example.org".into()));
        assert!(parse_member("ada@example.org").is_err());
        assert_eq!(parse_token("s1=owl").unwrap(), ("s1".into(), "owl".into()));
        assert!(parse_token("owl").is_err());
    }

    #[test]
    fn table_aligns_columns() {
        let header = vec!["rank".to_string(), "team".to_string(), "score".to_string()];
        let rows = vec![
            vec!["1".to_string(), "owl".to_string(), "0.500000".to_string()],
            vec!["10".to_string(), "heron-team".to_string(), "".to_string()],
        ];
        assert_eq!(
            render_table(&header, &rows),
            "rank  team           score\n\
             ----  ----------  --------\n   \
                1  owl         0.500000\n  \
               10  heron-team\n"
        );
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["arena".to_string(), "frobnicate".to_string()]), EXIT_USAGE);
        assert_eq!(main_with_args(["arena".to_string(), "--help".to_string()]), 0);
    }
}
