#![allow(dead_code)]

use std::path::Path;

use hdt_cli::config::RunConfig;

/// A 16×16, four-echo setup that runs every stage in seconds.
pub fn tiny_config() -> RunConfig {
    RunConfig::parse(
        r#"
seed = 3

[phantom]
size = 16
corpus_subjects = 2
corpus_echoes = 2

[acquisition]
echoes = 4
coils = 2
af = 2.0
center_lines = 4
navigator_lines = 4

[generator]
d_lat = 8
base = 4

[train]
epochs = 1
inner_steps = 1
batch = 2

[adapt]
passes = 1
param_steps = 4
steps_per_stage = 4
refine_steps = 4

[ilo]
steps_per_stage = 4
refine_steps = 4

[recon]
rank = 2
outer_iters = 2
steps_per_stage = 2
refine_steps = 2
init_steps_per_stage = 2
init_refine_steps = 2
irls_iters = 3
cg_iters = 20

[report]
af_sweep = [2.0]

[stylemix]
pairs = 2
sources = 2
"#,
    )
    .expect("tiny config parses")
}

/// `(width, height, pixels)` of a binary PGM.
pub fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = std::fs::read(path).expect("pgm readable");
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    let w: usize = fields[1].parse().unwrap();
    let h: usize = fields[2].parse().unwrap();
    let pixels = bytes[pos + 1..].to_vec();
    assert_eq!(pixels.len(), w * h);
    (w, h, pixels)
}

/// Every regular file under `dir`, relative path and contents, sorted.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
