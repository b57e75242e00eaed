use std::process::ExitCode;

fn main() -> ExitCode {
    let Err(e) = openset::cli::run(std::env::args_os()) else {
        return ExitCode::SUCCESS;
    };
    let mut chain = Vec::new();
    let mut source: Option<&dyn std::error::Error> = Some(&e);
    while let Some(s) = source {
        chain.push(s);
        source = s.source();
    }
    // A closed stdout (e.g. piping into `head`) is not a failure.
    let broken_pipe = chain.iter().any(|s| {
        s.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    });
    if broken_pipe {
        return ExitCode::SUCCESS;
    }
    eprintln!("error: {e}");
    for s in &chain[1..] {
        eprintln!("  caused by: {s}");
    }
    ExitCode::FAILURE
}
