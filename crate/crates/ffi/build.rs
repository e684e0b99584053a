use std::env;
use std::path::Path;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let config = cbindgen::Config::from_file(Path::new(&crate_dir).join("cbindgen.toml")).unwrap();
    let bindings = cbindgen::Builder::new().with_crate(&crate_dir).with_config(config).generate().unwrap();
    bindings.write_to_file(Path::new(&crate_dir).join("include/coact.h"));
}
