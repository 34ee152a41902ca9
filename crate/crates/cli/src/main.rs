fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(ampsim_cli::run_command(&argv));
}
