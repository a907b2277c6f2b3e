#include "stealth/corpus.hpp"
#include "stealth/genmodels.hpp"

namespace stealth::corpus {

CorpusManifest generate_fake_corpus(const gen::LatentDiffusionModel& ldm,
                                    const gen::VaeCodec& vae, int count, uint64_t seed,
                                    const std::filesystem::path& root) {
    if (count < 0) throw ConfigError("generated image count must be >= 0");
    if (!ldm.trained() || !vae.trained())
        throw StateError("generating a corpus needs trained diffusion and VAE models");
    CorpusManifest m;
    m.root = root;
    m.seed = seed;
    if (count == 0) return m;

    ensure_dir(root / "generated");
    char name[64];
    double scale = ldm.latent_scale();
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, "generated", static_cast<uint64_t>(i)));
        gen::LatentState z = gen::sample_latent(ldm, rng);
        for (size_t j = 0; j < z.z.numel(); ++j) z.z[j] *= scale;
        Tensor img = vae.decode(z);
        std::snprintf(name, sizeof(name), "f_%06d", i);
        std::string rel = std::string("generated/") + name + ".png";
        save_tensor_image(root / rel, img);
        m.records.push_back({name, rel, Label::generated, "toy_ldm", Split::train});
    }
    return m;
}

}  // namespace stealth::corpus
