fn main() {
    std::process::exit(poirec::run_cli());
}
