//! Layer-arithmetic parameter counts, read off the published configuration
//! tables of each architecture. Independent of the graph builder: nothing
//! here touches the library.

fn conv(cin: u64, cout: u64, k: u64, bias: bool) -> u64 {
    cout * cin * k * k + if bias { cout } else { 0 }
}

fn linear(din: u64, dout: u64) -> u64 {
    din * dout + dout
}

/// Trainable batch-norm parameters (γ, β).
fn bn(c: u64) -> u64 {
    2 * c
}

pub fn alexnet(classes: u64) -> u64 {
    let convs = [(3, 64, 11), (64, 192, 5), (192, 384, 3), (384, 256, 3), (256, 256, 3)];
    let features: u64 = convs.iter().map(|&(i, o, k)| conv(i, o, k, true)).sum();
    features + linear(256 * 6 * 6, 4096) + linear(4096, 4096) + linear(4096, classes)
}

pub fn vgg16(classes: u64) -> u64 {
    let cfg = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
    let mut cin = 3;
    let mut total = 0;
    for &c in &cfg {
        if c == 0 {
            continue;
        }
        total += conv(cin, c, 3, true);
        cin = c;
    }
    total + linear(512 * 7 * 7, 4096) + linear(4096, 4096) + linear(4096, classes)
}

pub fn resnet50(classes: u64) -> u64 {
    let mut total = conv(3, 64, 7, false) + bn(64);
    let mut cin = 64;
    for (blocks, width) in [(3u64, 64u64), (4, 128), (6, 256), (3, 512)] {
        let cout = width * 4;
        for b in 0..blocks {
            total += conv(cin, width, 1, false) + bn(width);
            total += conv(width, width, 3, false) + bn(width);
            total += conv(width, cout, 1, false) + bn(cout);
            if b == 0 {
                total += conv(cin, cout, 1, false) + bn(cout);
            }
            cin = cout;
        }
    }
    total + linear(2048, classes)
}

pub fn densenet121(classes: u64) -> u64 {
    let growth = 32;
    let bottleneck = 4 * growth;
    let mut total = conv(3, 64, 7, false) + bn(64);
    let mut c = 64;
    let blocks = [6u64, 12, 24, 16];
    for (i, &layers) in blocks.iter().enumerate() {
        for _ in 0..layers {
            total += bn(c) + conv(c, bottleneck, 1, false) + bn(bottleneck) + conv(bottleneck, growth, 3, false);
            c += growth;
        }
        if i + 1 < blocks.len() {
            total += bn(c) + conv(c, c / 2, 1, false);
            c /= 2;
        }
    }
    total + bn(c) + linear(c, classes)
}

/// Feature width feeding each architecture's classifier head.
pub fn head_input_width(arch: &str) -> u64 {
    match arch {
        "alexnet" | "vgg16" => 4096,
        "densenet121" => 1024,
        "resnet50" => 2048,
        other => panic!("unknown architecture {other}"),
    }
}
