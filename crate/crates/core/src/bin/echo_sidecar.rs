//! Test double for the sidecar protocol: hosts the identity encoder over
//! stdin/stdout.
//!
//! `--nondeterministic` advertises `deterministic: false`, which engines must
//! refuse.

use std::io::{self, BufReader, BufWriter};

use uvcg::encoder::IdentityEncoder;
use uvcg::wire::{serve, Capabilities, EncoderHost, HostError, ModelHost, Tensor};

struct Echo {
    inner: EncoderHost<IdentityEncoder>,
    deterministic: bool,
}

impl ModelHost for Echo {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            deterministic: self.deterministic,
            ..self.inner.capabilities()
        }
    }

    fn encode(&self, frame: Tensor) -> Result<Tensor, HostError> {
        self.inner.encode(frame)
    }

    fn loss_grad(&self, frame: Tensor, delta: Tensor, target: Tensor) -> Result<(Tensor, Tensor), HostError> {
        self.inner.loss_grad(frame, delta, target)
    }

    fn embed_image(&self, frame: Tensor) -> Result<Tensor, HostError> {
        self.inner.embed_image(frame)
    }

    fn embed_text(&self, text: &str) -> Result<Tensor, HostError> {
        self.inner.embed_text(text)
    }
}

fn main() {
    let deterministic = !std::env::args().skip(1).any(|a| a == "--nondeterministic");
    let host = Echo {
        inner: EncoderHost {
            encoder: IdentityEncoder,
            name: "echo".into(),
            latent_channels: 3,
            downsample_factor: 1,
        },
        deterministic,
    };
    let mut input = BufReader::new(io::stdin().lock());
    let mut output = BufWriter::new(io::stdout().lock());
    if let Err(e) = serve(&host, &mut input, &mut output) {
        eprintln!("echo sidecar: {e}");
        std::process::exit(1);
    }
}
