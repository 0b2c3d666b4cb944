//! Parameter layout of the full model and sentence-level translation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, EOS};
use crate::decoder::{self, beam_search, greedy_decode, Decoder, DecoderDims, Hypothesis, NeuralStepModel};
use crate::encoder::{self, Annotations, GruCell};
use crate::error::{Error, Result};
use crate::inferer::{self, GaussianParams, Inferer, Sampling};
use crate::params::ParameterStore;
use crate::tensor::{Graph, Precision, Var};

/// Which system is trained or decoded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Latent-conditioned decoder trained on the full bound.
    #[default]
    Vnmt,
    /// Latent fixed to the prior mean, no KL term.
    VnmtWoKl,
    /// Attention-only decoder, inferer unused.
    Baseline,
}

impl Mode {
    pub fn uses_latent(self) -> bool {
        self != Mode::Baseline
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vnmt => "vnmt",
            Mode::VnmtWoKl => "vnmt-wo-kl",
            Mode::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vnmt" => Ok(Mode::Vnmt),
            "vnmt-wo-kl" => Ok(Mode::VnmtWoKl),
            "baseline" => Ok(Mode::Baseline),
            _ => Err(Error::contract(format!("unknown mode `{s}`"))),
        }
    }
}

/// Layer sizes. `src_hidden` and `tgt_hidden` are per-direction encoder
/// widths; the decoder state has `tgt_hidden` units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub word_dim: usize,
    pub src_hidden: usize,
    pub tgt_hidden: usize,
    pub latent_dim: usize,
    pub latent_proj_dim: usize,
    pub attn_dim: usize,
    pub share_encoder: bool,
}

impl ModelDims {
    pub fn desk() -> Self {
        ModelDims {
            word_dim: 32,
            src_hidden: 32,
            tgt_hidden: 32,
            latent_dim: 32,
            latent_proj_dim: 32,
            attn_dim: 32,
            share_encoder: true,
        }
    }

    pub fn paper() -> Self {
        ModelDims {
            word_dim: 620,
            src_hidden: 1000,
            tgt_hidden: 1000,
            latent_dim: 2000,
            latent_proj_dim: 2000,
            attn_dim: 1000,
            share_encoder: true,
        }
    }

    pub fn uniform(d: usize) -> Self {
        ModelDims {
            word_dim: d,
            src_hidden: d,
            tgt_hidden: d,
            latent_dim: d,
            latent_proj_dim: d,
            attn_dim: d,
            share_encoder: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.word_dim,
            self.src_hidden,
            self.tgt_hidden,
            self.latent_dim,
            self.latent_proj_dim,
            self.attn_dim,
        ];
        if all.contains(&0) {
            return Err(Error::contract("all model dimensions must be positive"));
        }
        if self.share_encoder && self.src_hidden != self.tgt_hidden {
            return Err(Error::contract(format!(
                "shared encoder needs equal hidden sizes, got {} and {}",
                self.src_hidden, self.tgt_hidden
            )));
        }
        Ok(())
    }
}

/// Parameters plus the sizes they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub store: ParameterStore,
}

impl Model {
    /// Fresh seeded initialisation of every parameter.
    pub fn new(dims: ModelDims, src_vocab: usize, tgt_vocab: usize, precision: Precision, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(precision);
        store.insert_uniform("enc.src_emb", src_vocab, dims.word_dim, &mut rng)?;
        store.insert_uniform("enc.tgt_emb", tgt_vocab, dims.word_dim, &mut rng)?;
        encoder::init_gru(&mut store, "enc.fwd", dims.word_dim, dims.src_hidden, &mut rng)?;
        encoder::init_gru(&mut store, "enc.bwd", dims.word_dim, dims.src_hidden, &mut rng)?;
        if !dims.share_encoder {
            encoder::init_gru(&mut store, "enc_tgt.fwd", dims.word_dim, dims.tgt_hidden, &mut rng)?;
            encoder::init_gru(&mut store, "enc_tgt.bwd", dims.word_dim, dims.tgt_hidden, &mut rng)?;
        }
        let pooled_src = 2 * dims.src_hidden;
        let pooled_tgt = 2 * dims.tgt_hidden;
        inferer::init_gaussian_net(&mut store, "post", pooled_src + pooled_tgt, dims.latent_dim, &mut rng)?;
        inferer::init_gaussian_net(&mut store, "prior", pooled_src, dims.latent_dim, &mut rng)?;
        store.insert_uniform("latent.W2", dims.latent_proj_dim, dims.latent_dim, &mut rng)?;
        store.insert_zeros("latent.b2", 1, dims.latent_proj_dim)?;
        decoder::init_decoder(
            &mut store,
            DecoderDims {
                vocab: tgt_vocab,
                word: dims.word_dim,
                hidden: dims.tgt_hidden,
                src_hidden: dims.src_hidden,
                latent_proj: dims.latent_proj_dim,
                attn: dims.attn_dim,
            },
            &mut rng,
        )?;
        Ok(Model {
            dims,
            src_vocab,
            tgt_vocab,
            store,
        })
    }

    pub fn precision(&self) -> Precision {
        self.store.precision()
    }

    /// Prefix of the GRU cells that read target sentences.
    pub fn target_encoder_prefix(&self) -> &'static str {
        if self.dims.share_encoder {
            "enc"
        } else {
            "enc_tgt"
        }
    }

    /// Bidirectional annotations of the padded source side.
    pub fn encode_source(&self, g: &mut Graph, ids: &[Vec<usize>], mask: &[Vec<f64>]) -> Result<Annotations> {
        self.encode(g, "enc.src_emb", "enc", ids, mask)
    }

    /// Bidirectional annotations of the padded target side.
    pub fn encode_target(&self, g: &mut Graph, ids: &[Vec<usize>], mask: &[Vec<f64>]) -> Result<Annotations> {
        self.encode(g, "enc.tgt_emb", self.target_encoder_prefix(), ids, mask)
    }

    fn encode(&self, g: &mut Graph, table: &str, prefix: &str, ids: &[Vec<usize>], mask: &[Vec<f64>]) -> Result<Annotations> {
        let table = g.param(&self.store, table)?;
        let fwd = GruCell::bind(g, &self.store, &format!("{prefix}.fwd"))?;
        let bwd = GruCell::bind(g, &self.store, &format!("{prefix}.bwd"))?;
        let emb = encoder::embed_positions(g, table, ids)?;
        encoder::encode_bidirectional(g, &fwd, &bwd, &emb, &encoder::transpose_mask(mask))
    }

    /// Prior over the latent for each source row of a batch, together with
    /// the source annotations it was computed from.
    pub fn source_prior(&self, g: &mut Graph, batch_src: &[Vec<usize>], mask: &[Vec<f64>]) -> Result<(Annotations, Var, GaussianParams)> {
        let ann = self.encode_source(g, batch_src, mask)?;
        let h_f = encoder::mean_pool(g, &ann)?;
        let inf = Inferer::bind(g, &self.store)?;
        let p = inferer::prior(g, &inf, h_f)?;
        Ok((ann, h_f, p))
    }

    /// Summed target NLL per sentence with the latent fixed at the prior
    /// mean (or disabled for the baseline), as used at translation time.
    pub fn decode_time_nll(&self, g: &mut Graph, batch: &Batch, mode: Mode) -> Result<Var> {
        let dec = Decoder::bind(g, &self.store)?;
        let (ann, h_e_prime) = if mode.uses_latent() {
            let (ann, _, p) = self.source_prior(g, &batch.src, &batch.src_mask)?;
            let inf = Inferer::bind(g, &self.store)?;
            let s = inferer::reparameterize(g, &p, Sampling::PriorMean)?;
            (ann, Some(inferer::project_latent(g, &inf, &s)?))
        } else {
            (self.encode_source(g, &batch.src, &batch.src_mask)?, None)
        };
        decoder::teacher_forced_nll(g, &dec, &ann, h_e_prime, &batch.tgt, &batch.tgt_mask)
    }

    fn step_model(&self, src: &[usize], mode: Mode) -> Result<NeuralStepModel> {
        if src.is_empty() {
            return Err(Error::contract("cannot translate an empty source sentence"));
        }
        if let Some(&bad) = src.iter().find(|&&t| t >= self.src_vocab) {
            return Err(Error::Vocabulary { id: bad, size: self.src_vocab });
        }
        let mut ids = src.to_vec();
        ids.push(EOS);
        let mask = vec![vec![1.0; ids.len()]];
        let rows = vec![ids];
        let mut g = Graph::new(self.precision());
        let dec = Decoder::bind(&mut g, &self.store)?;
        let (ann, h_e_prime) = if mode.uses_latent() {
            let (ann, _, p) = self.source_prior(&mut g, &rows, &mask)?;
            let inf = Inferer::bind(&mut g, &self.store)?;
            let s = inferer::reparameterize(&mut g, &p, Sampling::PriorMean)?;
            let h = inferer::project_latent(&mut g, &inf, &s)?;
            (ann, Some(h))
        } else {
            (self.encode_source(&mut g, &rows, &mask)?, None)
        };
        NeuralStepModel::new(g, dec, &ann, h_e_prime)
    }

    /// Beam-search translation of one encoded source sentence (without EOS).
    /// VNMT modes decode with the latent at the prior mean.
    pub fn translate(&self, src: &[usize], mode: Mode, beam_size: usize, max_len: usize) -> Result<Hypothesis<Vec<f64>>> {
        let mut m = self.step_model(src, mode)?;
        beam_search(&mut m, beam_size, max_len)
    }

    pub fn translate_greedy(&self, src: &[usize], mode: Mode, max_len: usize) -> Result<Hypothesis<Vec<f64>>> {
        let mut m = self.step_model(src, mode)?;
        greedy_decode(&mut m, max_len)
    }
}

/// Output length cap `factor * |source| + 5`.
pub fn max_output_len(src_len: usize, factor: usize) -> usize {
    factor * src_len + 5
}
