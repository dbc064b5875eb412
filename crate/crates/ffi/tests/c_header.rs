//! Compiles and runs a C program against the generated header and the
//! static library. Skipped when no C compiler or archive is available.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "algebroid_lab.h"

int main(void) {
    AlModel *m = NULL;
    if (al_model_bundled("flat_tm1", &m) != AL_STATUS_OK) return 10;
    double x0[1] = {0.0}, y0[1] = {2.0}, state[2], drift;
    if (al_geodesic(m, x0, y0, 1.0, 0.01, state, 2, &drift) != AL_STATUS_OK) return 11;
    al_model_free(m);
    if (state[0] < 1.999999 || state[0] > 2.000001) return 12;
    if (al_model_bundled("missing", &m) != AL_STATUS_INVALID) return 13;
    char buf[128];
    if (al_last_error(buf, sizeof buf) == 0 || strstr(buf, "missing") == NULL) return 14;
    printf("%s\n", al_version());
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_is_current_and_usable_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(crate_dir.join("include/algebroid_lab.h")).unwrap();
    for f in [
        "al_model_bundled",
        "al_geodesic",
        "al_killing_find",
        "al_sigma_solve",
        "al_last_error",
        "al_cli_run",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let lib = target_dir().join("libalgebroid_lab_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping C build: {} or cc not available", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "C smoke test exited with {:?}",
        out.status.code()
    );
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        env!("CARGO_PKG_VERSION")
    );
}
