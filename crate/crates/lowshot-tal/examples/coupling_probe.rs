use lowshot_tal::synthdata::{generate, SynthSpec};

fn main() {
    let spec = SynthSpec {
        n_classes: 12,
        n_train_videos: 60,
        n_test_videos: 36,
        snippets: 128,
        instances_per_video: (1, 3),
        length_range: (8, 48),
        noise: 0.1,
        text_visual_coupling: 0.9,
        seed: 0,
        d_rgb: 16,
        d_flow: 16,
        d_text: 32,
        latent_rank: Some(6),
        encoder_seed: 1913,
        pool_size: 120,
        max_desc_words: 12,
        name_words: 2,
    };
    let dir = std::env::temp_dir().join("coupling_probe");
    let _ = std::fs::remove_dir_all(&dir);
    let start = std::time::Instant::now();
    let manifest_path = generate(&spec, &dir).unwrap();
    let manifest = lowshot_tal::data::Manifest::load(&manifest_path).unwrap();
    println!("generation took {:?}", start.elapsed());
    println!("meta: {}", serde_json::to_string_pretty(&manifest.meta).unwrap());
}
