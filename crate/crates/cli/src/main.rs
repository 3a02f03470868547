fn main() {
    std::process::exit(raycast_evidence_cli::app::main_with_args(
        std::env::args_os(),
    ));
}
