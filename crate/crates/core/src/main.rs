use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let r = sharpdepth::cli::run_from_args(std::env::args_os());
    // Write errors (e.g. a closed pipe) must not turn a finished command into a panic.
    if r.exit_code == 0 {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{}", r.summary.trim_end());
        if r.artifacts.len() <= 20 {
            for p in &r.artifacts {
                let _ = writeln!(out, "  {}", p.display());
            }
        } else {
            let _ = writeln!(out, "  {} files written", r.artifacts.len());
        }
    } else {
        let _ = writeln!(std::io::stderr(), "{}", r.summary.trim_end());
    }
    ExitCode::from(r.exit_code.clamp(0, 255) as u8)
}
