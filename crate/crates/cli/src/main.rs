use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let root = agentgit_cli::store_root_from_env();
    let code = agentgit_cli::run(std::env::args_os(), &root, &mut io::stdout().lock(), &mut io::stderr().lock());
    ExitCode::from(code as u8)
}
