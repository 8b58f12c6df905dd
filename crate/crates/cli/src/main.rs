fn main() {
    eprintln!("ellipq: not yet wired");
    std::process::exit(2);
}
