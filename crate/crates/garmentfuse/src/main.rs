use std::io::Write;

fn main() {
    let code = garmentfuse::cli::main_with_args(
        std::env::args_os(),
        &mut |line| println!("{line}"),
        &mut |line| {
            let _ = writeln!(std::io::stderr(), "{line}");
        },
    );
    std::process::exit(code);
}
