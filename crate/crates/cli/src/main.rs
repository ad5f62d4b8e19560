fn main() {
    std::process::exit(embedding_audit_cli::run(std::env::args_os()));
}
