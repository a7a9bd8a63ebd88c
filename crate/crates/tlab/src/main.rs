fn main() {
    // Thin front end; wired to the library harness once it lands.
    eprintln!("tlab: not yet wired");
    std::process::exit(1);
}
