use clap::Parser;

fn main() {
    let cli = hmatvec::cli::Cli::parse();
    match hmatvec::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
