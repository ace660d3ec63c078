//! The generated header is valid C and C++ and exposes the whole ABI.

use std::path::PathBuf;
use std::process::Command;

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/codecserve.h")
}

#[test]
fn declares_every_export() {
    let text = std::fs::read_to_string(header()).expect("header generated by build.rs");
    for sym in [
        "cs_version",
        "cs_status_name",
        "cs_last_error_message",
        "cs_decode_params_default",
        "cs_engine_new",
        "cs_engine_free",
        "cs_engine_config_checksum",
        "cs_engine_load_adapter",
        "cs_engine_unload_adapter",
        "cs_engine_synthesize",
        "cs_codec_new",
        "cs_codec_free",
        "cs_codec_frame_len",
        "cs_codec_token_to_frame",
        "cs_codec_frame_to_token",
        "cs_per",
        "typedef struct CsEngine CsEngine",
        "typedef struct CsCodec CsCodec",
        "CS_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
}

fn compiles_with(compiler: &str, lang: &str) {
    let dir = tempfile_dir();
    let src = dir.join(format!("probe.{lang}"));
    std::fs::write(
        &src,
        "#include \"codecserve.h\"\nint probe(void) { CsDecodeParams p = cs_decode_params_default(); return (int)p.top_k; }\n",
    )
    .unwrap();
    let Ok(out) = Command::new(compiler)
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("{compiler} not available; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn tempfile_dir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("codecserve-hdr-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn header_compiles_as_c() {
    compiles_with("cc", "c");
}

#[test]
fn header_compiles_as_cpp() {
    compiles_with("c++", "cpp");
}

/// Build `tests/c/smoke.c` against the shared library and run it.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    // target/<profile>/deps/<test> -> target/<profile>
    let lib_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    if !lib_dir.join("libcodecserve_ffi.so").exists() {
        eprintln!("shared library not built in {}; skipping", lib_dir.display());
        return;
    }
    let out = tempfile_dir().join("smoke");
    let src = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/c/smoke.c");
    let Ok(build) = Command::new("cc")
        .args(["-Wall", "-Werror", "-o"])
        .arg(&out)
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg("-L")
        .arg(&lib_dir)
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-lcodecserve_ffi")
        .output()
    else {
        eprintln!("cc not available; skipping");
        return;
    };
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&out).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains("per=0.50"), "{stdout}");
}
