use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rsm_apps::bench::{self, Row};
use rsm_apps::driver::run_local;
use rsm_apps::poolserver::{self, PoolInfo, PoolOptions};
use rsm_apps::programs::{BankProgram, ClientOp, NamedMonitors, PoolProgram, WordCountProgram};
use rsm_apps::{bank, wordcount};
use rsm_core::cluster::LocalCluster;
use rsm_core::codec::{from_bytes, to_bytes};
use rsm_core::model::{Envelope, RsmId};
use rsm_core::storage::FsyncPolicy;
use rsm_core::{Event, HostConfig, MachineHost};
use rsm_semantics::check::{self, NiOptions, NiVerdict, TransparencyOptions};
use rsm_semantics::{parse_program, GlobalConfig, Program};
use rsm_testkit::{explore, mock, CrashPolicy, ExploreConfig, MonitorFactory, Strategy, TestProgram};

#[derive(Parser)]
#[command(name = "rsm", version, about = "Reliable state machines: runtime, tester, semantics and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Deploy an example application on local hosts.
    Run(RunArgs),
    /// Systematically test an example application.
    Test(TestArgs),
    /// Interpret and check programs of the core calculus.
    #[command(subcommand)]
    Semantics(SemCmd),
    /// Microbenchmarks, written as CSV.
    Bench(BenchArgs),
    /// Pool server client operations against a local durable host.
    Poolserver(PoolArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum App {
    Wordcount,
    Bank,
}

#[derive(Args)]
struct RunArgs {
    #[arg(value_enum)]
    app: App,
    /// Host config files, one per partition; the app starts on the first.
    #[arg(long = "config")]
    configs: Vec<PathBuf>,
    /// Words for wordcount (whitespace separated); stdin if absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = wordcount::DEFAULT_SHARDS)]
    shards: u32,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProgramName {
    Wordcount,
    Poolserver,
    Bank,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mutation {
    NoCreatingCount,
    VolatileCreatedCount,
    VolatileWordFreq,
    UnstableRouting,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long, value_enum)]
    program: ProgramName,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    max_steps: usize,
    /// random, round-robin or pct[:depth]
    #[arg(long, default_value = "random")]
    strategy: Strategy,
    /// Crash a handler commit with this probability (default 0.05 when set).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.05")]
    inject_crashes: Option<f64>,
    /// Only these monitors (default: all of the program's).
    #[arg(long = "monitor")]
    monitors: Vec<String>,
    #[arg(long, value_enum)]
    mutation: Option<Mutation>,
    /// Skip comparing the writes of crashed commits with their retries.
    #[arg(long)]
    no_write_check: bool,
    /// Pool scenario: initial size, optional resize, or delete.
    #[arg(long, default_value_t = 10)]
    pool_size: u64,
    #[arg(long)]
    resize: Option<i64>,
    #[arg(long)]
    delete: bool,
    #[arg(long, default_value_t = 200)]
    words: usize,
}

#[derive(Subcommand)]
enum SemCmd {
    /// Reset-free round-robin run; prints the ghost traces.
    Run {
        program: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        star_domain: i64,
        #[arg(long, default_value_t = 100)]
        max_handlers: usize,
    },
    /// Enumerate reset placements and compare with the reset-free run.
    CheckTransparency {
        program: PathBuf,
        /// `all` or the most resets per run.
        #[arg(long, default_value = "all")]
        resets: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        star_domain: i64,
        #[arg(long, default_value_t = 8)]
        max_handlers: usize,
    },
    /// Non-interference of every class handler.
    CheckNi {
        program: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scenario {
    Creation,
    Latency,
    Throughput,
    Writes,
    All,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_enum, default_value = "all")]
    scenario: Scenario,
    #[arg(long, default_value_t = 1000)]
    machines: usize,
    #[arg(long, default_value_t = 1000)]
    messages: usize,
    #[arg(long, default_value_t = 100)]
    payload: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,16,64")]
    batch: Vec<usize>,
    /// always, never or batched:N
    #[arg(long, default_value = "always")]
    fsync: FsyncPolicy,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PoolArgs {
    #[command(subcommand)]
    op: PoolOp,
    #[arg(long, global = true, default_value = "rsm-pool")]
    data: PathBuf,
    #[arg(long, global = true, default_value_t = 0.0)]
    fail_probability: f64,
}

#[derive(Subcommand)]
enum PoolOp {
    Create {
        #[arg(long)]
        size: u64,
    },
    Get,
    Resize {
        #[arg(long)]
        size: i64,
    },
    Delete,
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Test(a) => test(a),
        Cmd::Semantics(c) => semantics(c),
        Cmd::Bench(a) => run_bench(a),
        Cmd::Poolserver(a) => pool(a),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn payload<T: rsm_core::Codec>(e: &Envelope) -> Result<T, rsm_core::codec::CodecError> {
    from_bytes(&e.event.payload)
}

fn run(a: RunArgs) -> CliResult {
    let mut configs = a
        .configs
        .iter()
        .map(|p| Ok(HostConfig::parse(&std::fs::read_to_string(p)?)?))
        .collect::<Result<Vec<_>, Box<dyn std::error::Error>>>()?;
    if configs.is_empty() {
        configs.push(HostConfig::new("p0"));
    }
    let partitions: Vec<String> = configs.iter().map(|c| c.partition.clone()).collect();
    for c in &mut configs {
        c.partitions = partitions.clone();
    }
    let timeout = Duration::from_secs(a.timeout_secs);
    match a.app {
        App::Wordcount => {
            let text = match &a.input {
                Some(p) => std::fs::read_to_string(p)?,
                None => std::io::read_to_string(std::io::stdin())?,
            };
            let cluster = LocalCluster::start(configs, wordcount::registry(Default::default()))?;
            let main = cluster.create(wordcount::MAIN, &partitions[0])?;
            cluster.send(&main, wordcount::INIT, to_bytes(&a.shards));
            for w in text.split_whitespace() {
                cluster.send(&main, wordcount::WORD, to_bytes(&w));
            }
            cluster.wait_quiescent(timeout)?;
            let mut last = None;
            while let Ok(e) = cluster.outputs().try_recv() {
                last = Some(payload::<(String, u64)>(&e)?);
            }
            cluster.shutdown();
            match last {
                Some((w, f)) => println!("{w} {f}"),
                None => println!("no words"),
            }
        }
        App::Bank => {
            let cluster = LocalCluster::start(configs, bank::registry())?;
            let home = &partitions[0];
            let accounts = (0..4)
                .map(|i| cluster.create(bank::ACCOUNT, &partitions[i % partitions.len()]))
                .collect::<Result<Vec<_>, _>>()?;
            for acc in &accounts {
                cluster.send(acc, bank::OPEN, to_bytes(&100i64));
            }
            cluster.wait_quiescent(timeout)?;
            let broker = cluster.create(bank::BROKER, home)?;
            for i in 0..accounts.len() {
                let to = &accounts[(i + 1) % accounts.len()];
                cluster.send(&broker, bank::TRANSFER, to_bytes(&(accounts[i].clone(), to.clone(), 10 * (i as i64 + 1))));
            }
            cluster.wait_quiescent(timeout)?;
            for acc in &accounts {
                cluster.send(acc, bank::GET_BALANCE, Vec::new());
            }
            cluster.wait_quiescent(timeout)?;
            while let Ok(e) = cluster.outputs().try_recv() {
                match e.event.event_type {
                    bank::TRANSFER_DONE => {
                        let (t, ok): (u64, bool) = payload(&e)?;
                        println!("transfer {t}: {}", if ok { "done" } else { "refused" });
                    }
                    bank::BALANCE => println!("{}: {}", e.event.source, payload::<i64>(&e)?),
                    _ => {}
                }
            }
            cluster.shutdown();
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn test(a: TestArgs) -> CliResult {
    let mut pool_opts = PoolOptions::default();
    let mut wc_opts = wordcount::WordCountOptions::default();
    match a.mutation {
        Some(Mutation::NoCreatingCount) => pool_opts.no_creating_count = true,
        Some(Mutation::VolatileCreatedCount) => pool_opts.volatile_created_count = true,
        Some(Mutation::VolatileWordFreq) => wc_opts.volatile_word_freq = true,
        Some(Mutation::UnstableRouting) => wc_opts.unstable_routing = true,
        None => {}
    }
    let program: Box<dyn Prog> = match a.program {
        ProgramName::Wordcount => Box::new(WordCountProgram {
            words: (0..a.words).map(|i| format!("w{}", (i * i + 3 * i) % 17)).collect(),
            shards: wordcount::DEFAULT_SHARDS,
            opts: wc_opts,
        }),
        ProgramName::Poolserver => {
            let mut ops = vec![ClientOp::Create(a.pool_size)];
            ops.extend(a.resize.map(ClientOp::Resize));
            if a.delete {
                ops.push(ClientOp::Delete);
            }
            Box::new(PoolProgram::new(ops, pool_opts))
        }
        ProgramName::Bank => Box::new(BankProgram {
            accounts: 4,
            opening: 100,
            brokers: 2,
            transfers: (0..20).map(|i| (i % 4, (i + 1 + i / 4) % 4, 15 * (i as i64 % 5))).collect(),
        }),
    };
    let named = program.named_monitors();
    for m in &a.monitors {
        if !named.iter().any(|(n, _)| n == m) {
            let known: Vec<&str> = named.iter().map(|(n, _)| *n).collect();
            return Err(format!("unknown monitor `{m}`; this program has {}", known.join(", ")).into());
        }
    }
    let monitors: Vec<MonitorFactory> = named
        .into_iter()
        .filter(|(n, _)| a.monitors.is_empty() || a.monitors.iter().any(|m| m == n))
        .map(|(_, m)| m)
        .collect();
    let cfg = ExploreConfig {
        iterations: a.iterations,
        seed: a.seed,
        max_steps: a.max_steps,
        strategy: a.strategy,
        crashes: a.inject_crashes.map_or(CrashPolicy::Never, CrashPolicy::Random),
        check_writes: !a.no_write_check,
        ..ExploreConfig::default()
    };
    let report = explore(program.as_test(), &monitors, &cfg)?;
    println!("{}", report.to_json());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

trait Prog: NamedMonitors {
    fn as_test(&self) -> &dyn TestProgram;
}

impl<T: NamedMonitors + TestProgram> Prog for T {
    fn as_test(&self) -> &dyn TestProgram {
        self
    }
}

fn load_program(path: &Path) -> Result<Program, Box<dyn std::error::Error>> {
    Ok(parse_program(&std::fs::read_to_string(path)?)?)
}

fn semantics(c: SemCmd) -> CliResult {
    match c {
        SemCmd::Run {
            program,
            seed,
            star_domain,
            max_handlers,
        } => {
            let p = load_program(&program)?;
            let mut g = GlobalConfig::initial(&p, seed, star_domain);
            rsm_semantics::global::run_round_robin(&p, &mut g, max_handlers, 100_000)?;
            print!("{}", g.trace_dump());
            Ok(ExitCode::SUCCESS)
        }
        SemCmd::CheckTransparency {
            program,
            resets,
            seed,
            star_domain,
            max_handlers,
        } => {
            let p = load_program(&program)?;
            let max_resets = match resets.as_str() {
                "all" => TransparencyOptions::default().max_resets,
                n => n.parse()?,
            };
            let opts = TransparencyOptions {
                max_resets,
                max_handlers,
                ..TransparencyOptions::default()
            };
            let r = check::check_program_transparency(&p, seed, star_domain, &opts)?;
            if let Some(v) = r.violations.first() {
                println!("FAIL {v}");
                return Ok(ExitCode::FAILURE);
            }
            println!("PASS {} handlers, {} runs with resets", r.handlers, r.runs);
            Ok(ExitCode::SUCCESS)
        }
        SemCmd::CheckNi { program, seed } => {
            let p = load_program(&program)?;
            let events: Vec<(i64, i64, i64)> = (0..3).flat_map(|e| (0..3).map(move |v| (1, e, v))).collect();
            let opts = NiOptions {
                seed,
                ..NiOptions::default()
            };
            let mut failed = false;
            for class in p.classes.keys() {
                match check::check_class_non_interference(&p, class, &events, &opts)? {
                    NiVerdict::Pass { perturbations, .. } => println!("PASS {class} ({perturbations} perturbations)"),
                    NiVerdict::Counterexample(c) => {
                        failed = true;
                        println!("FAIL {class}: {c}");
                    }
                }
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
    }
}

fn run_bench(a: BenchArgs) -> CliResult {
    let dir = tempfile::tempdir()?;
    let want = |s: Scenario| a.scenario == s || a.scenario == Scenario::All;
    let mut rows: Vec<Row> = Vec::new();
    if want(Scenario::Creation) {
        for shared in [true, false] {
            rows.push(bench::creation(dir.path(), a.machines, shared, a.fsync)?);
        }
    }
    if want(Scenario::Latency) {
        rows.extend(bench::latency(dir.path(), a.messages, a.payload, a.fsync)?);
    }
    if want(Scenario::Throughput) {
        for &b in &a.batch {
            rows.push(bench::throughput(dir.path(), a.messages, a.payload, b, a.fsync)?);
        }
    }
    if want(Scenario::Writes) {
        for inbox in [true, false] {
            rows.push(bench::durable_writes(a.messages, inbox)?);
        }
    }
    match &a.out {
        Some(p) => bench::write_csv(&rows, std::fs::File::create(p)?)?,
        None => bench::write_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn pool(a: PoolArgs) -> CliResult {
    let opts = PoolOptions {
        mock: mock::MockConfig {
            fail_probability: a.fail_probability,
            unhealthy_probability: 0.0,
        },
        ..PoolOptions::default()
    };
    let host = MachineHost::open(
        HostConfig {
            store_path: Some(a.data.clone()),
            ..HostConfig::new("pool")
        },
        poolserver::registry(opts),
    )?;
    let pm = host
        .machines()
        .into_iter()
        .find(|id| host.class_of(id).as_deref() == Some(poolserver::PM));
    let send = |pm: &RsmId, t: u32, p: Vec<u8>| host.enqueue_local(pm, Event::new(RsmId::env(), t, p));
    let pm = match (a.op, pm) {
        (PoolOp::Create { size }, None) => {
            let provider = host.create_local(mock::CLASS)?;
            let pm = host.create_local(poolserver::PM)?;
            send(&pm, poolserver::CREATE_POOL, to_bytes(&(size, provider)))?;
            pm
        }
        (PoolOp::Create { .. }, Some(pm)) => return Err(format!("a pool already exists in {}: {pm}", a.data.display()).into()),
        (_, None) => return Err(format!("no pool in {}", a.data.display()).into()),
        (PoolOp::Get, Some(pm)) => {
            send(&pm, poolserver::GET_POOL, Vec::new())?;
            pm
        }
        (PoolOp::Resize { size }, Some(pm)) => {
            send(&pm, poolserver::RESIZE_POOL, to_bytes(&size))?;
            pm
        }
        (PoolOp::Delete, Some(pm)) => {
            send(&pm, poolserver::DELETE_POOL, Vec::new())?;
            pm
        }
    };
    let mut code = ExitCode::SUCCESS;
    for e in run_local(&host, usize::MAX)? {
        match e.event.event_type {
            poolserver::POOL_READY => println!("pool {pm} created with {} resources", payload::<u64>(&e)?),
            poolserver::POOL_DELETED => println!("pool {pm} deleted"),
            poolserver::POOL_INFO => {
                let (state, goal, count, creating, created, deleting): PoolInfo = payload(&e)?;
                println!(
                    "pool {pm}: state {state}, goal {goal} {count}, creating {creating}, created {created}, deleting {deleting}"
                );
            }
            poolserver::CLIENT_ERROR => {
                eprintln!("client error: {}", payload::<String>(&e)?);
                code = ExitCode::FAILURE;
            }
            _ => {}
        }
    }
    host.store().close();
    Ok(code)
}
