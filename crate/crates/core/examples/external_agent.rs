//! A served session: the engine listens on a local port and a reference
//! agent connects, claims two agent ids and trades over line-delimited
//! JSON while the rest of the market runs built-in traders.

use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

use diagon::experiment::{serve_on, ExperimentSpec};
use diagon::policy::external::run_reference_agent;
use diagon::policy::ReferenceBehaviour;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join(format!("diagon-serve-{}", std::process::id()));
    let mut spec = ExperimentSpec::from_toml(
        r#"
        name = "served"
        seeds = [1]
        agent_timeout_secs = 2.0
        [config]
        rounds = 6
        [policies.assign]
        "4" = "serve"
        "9" = "serve"
        "#,
    )?;
    spec.output_dir = out.clone();

    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    println!("serving on {addr}");
    let agent = thread::spawn(move || -> std::io::Result<_> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        writeln!(writer, r#"{{"hello":{{"agents":[4,9]}}}}"#)?;
        run_reference_agent(BufReader::new(stream), writer, ReferenceBehaviour::Cooperative)
    });
    let run = serve_on(&spec, listener)?;
    let stats = agent.join().expect("agent thread")?;
    println!("agent handled {} requests and {} balance queries", stats.requests, stats.answers);

    let log = &run.seeds[0].log;
    for id in [4, 9] {
        let won = log.transactions().filter(|t| t.contractor.0 == id).count();
        let posted = log.transactions().filter(|t| t.poster.0 == id).count();
        let wealth = log.final_agents().iter().find(|a| a.agent_id.0 == id).map_or(0.0, |a| a.wealth);
        println!("agent {id}: won {won}, awarded {posted}, final wealth {wealth:.4}");
    }
    println!("log at {}", run.seeds[0].log_path.display());
    Ok(())
}
