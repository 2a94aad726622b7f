use clap::ValueEnum;
use serde::{Deserialize, Serialize};

/// Named default sets. `paper` is the full-size training setup
/// (batch 64, lr 2e-4, 25 epochs, 2 layers, width 512); `desk` shrinks data
/// and width so a run takes seconds on one core.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileDefaults {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub d: usize,
    pub d_latent: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub n_layers: usize,
}

impl Profile {
    pub fn defaults(self) -> ProfileDefaults {
        match self {
            Profile::Desk => ProfileDefaults {
                train_pairs: 200,
                test_pairs: 100,
                d: 32,
                d_latent: 4,
                n_v: 4,
                n_t: 5,
                batch_size: 8,
                epochs: 25,
                // 2e-4 leaves 625 desk steps near the initialisation
                learning_rate: 1e-3,
                n_layers: 2,
            },
            Profile::Paper => ProfileDefaults {
                train_pairs: 2000,
                test_pairs: 1000,
                d: 512,
                d_latent: 32,
                n_v: 8,
                n_t: 10,
                batch_size: 64,
                epochs: 25,
                learning_rate: 2e-4,
                n_layers: 2,
            },
        }
    }
}
