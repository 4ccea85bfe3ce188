// Stand-in for an ffmpeg-style H.264 encoder, used where no real encoder is
// installed. Honors the two invocations the pipeline issues:
//
//   encode: ... -framerate F -i DIR/in_%05d.ppm -c:v libx264 -crf C
//           -pix_fmt yuv420p DIR/seq.mp4
//   decode: ... -i DIR/seq.mp4 DIR/out_%05d.ppm
//
// "Compression" is a deterministic lossy quantization whose strength follows
// the CRF value, stored in a trivial container. Frame count and order are
// preserved exactly.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

fn fail(msg: &str) -> ! {
    eprintln!("mock-encoder: {msg}");
    std::process::exit(1);
}

fn read_ppm(path: &PathBuf) -> (u32, u32, Vec<u8>) {
    let data = fs::read(path).unwrap_or_else(|e| fail(&format!("read {path:?}: {e}")));
    let mut fields: Vec<String> = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < data.len() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&data[start..pos]).to_string());
    }
    if fields.first().map(String::as_str) != Some("P6") {
        fail("input frame is not P6");
    }
    let w: u32 = fields[1].parse().unwrap_or_else(|_| fail("bad width"));
    let h: u32 = fields[2].parse().unwrap_or_else(|_| fail("bad height"));
    pos += 1;
    (w, h, data[pos..pos + (w * h * 3) as usize].to_vec())
}

fn write_ppm(path: &PathBuf, w: u32, h: u32, pixels: &[u8]) {
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).unwrap_or_else(|e| fail(&format!("write {path:?}: {e}")));
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut input: Option<String> = None;
    let mut crf: u32 = 23;
    let mut output: Option<String> = None;
    let mut i = 0;
    while i < args.len() {
        match args[i].as_str() {
            "-i" => {
                i += 1;
                input = Some(args[i].clone());
            }
            "-crf" => {
                i += 1;
                crf = args[i].parse().unwrap_or(23);
            }
            "-y" => {}
            "-loglevel" | "-framerate" | "-c:v" | "-pix_fmt" => {
                i += 1;
            }
            other => {
                output = Some(other.to_string());
            }
        }
        i += 1;
    }
    let input = input.unwrap_or_else(|| fail("no -i input"));
    let output = output.unwrap_or_else(|| fail("no output"));

    if input.contains("%05d") {
        // encode: gather frames, quantize, store in the container
        let step = (crf / 4).max(2) as u16;
        let mut frames: Vec<(u32, u32, Vec<u8>)> = Vec::new();
        let mut idx = 1u32;
        loop {
            let path = PathBuf::from(input.replace("%05d", &format!("{idx:05}")));
            if !path.is_file() {
                break;
            }
            let (w, h, pixels) = read_ppm(&path);
            let lossy: Vec<u8> = pixels
                .iter()
                .map(|&v| {
                    let q = (v as u16 / step) * step + step / 2;
                    q.min(255) as u8
                })
                .collect();
            frames.push((w, h, lossy));
            idx += 1;
        }
        if frames.is_empty() {
            fail("no input frames");
        }
        let mut out = fs::File::create(&output).unwrap_or_else(|e| fail(&format!("{e}")));
        out.write_all(b"MOCKV1\0\0").unwrap();
        out.write_all(&(frames.len() as u32).to_le_bytes()).unwrap();
        for (w, h, pixels) in &frames {
            out.write_all(&w.to_le_bytes()).unwrap();
            out.write_all(&h.to_le_bytes()).unwrap();
            out.write_all(pixels).unwrap();
        }
    } else {
        // decode: expand the container back into numbered frames
        let data = fs::read(&input).unwrap_or_else(|e| fail(&format!("{e}")));
        if &data[0..8] != b"MOCKV1\0\0" {
            fail("not a mock container");
        }
        let count = u32::from_le_bytes(data[8..12].try_into().unwrap());
        let mut pos = 12usize;
        for f in 0..count {
            let w = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap());
            let h = u32::from_le_bytes(data[pos + 4..pos + 8].try_into().unwrap());
            pos += 8;
            let len = (w * h * 3) as usize;
            let path = PathBuf::from(output.replace("%05d", &format!("{:05}", f + 1)));
            write_ppm(&path, w, h, &data[pos..pos + len]);
            pos += len;
        }
    }
}
