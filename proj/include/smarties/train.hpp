#pragma once

#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "smarties/model.hpp"
#include "smarties/optimizer.hpp"
#include "smarties/raster.hpp"
#include "smarties/rng.hpp"
#include "smarties/tokenizer.hpp"

namespace smarties {

// A co-registered pair, harmonized and patchified once up front.
struct PairSample {
    PatchGrid a;
    PatchGrid b;
    std::string scene_id;
    int label = -1;
};

template <class T>
PairSample prepare_pair(const PairRecord& rec, const ProjectionBankT<T>& bank,
                        const ModelConfig& cfg) {
    const SensorSpec& spec_a = bank.sensor(rec.sensor_a);
    const SensorSpec& spec_b = bank.sensor(rec.sensor_b);
    if (!spec_a.stats || !spec_b.stats)
        throw DataError("pretraining requires harmonization stats for sensors '" + rec.sensor_a +
                        "' and '" + rec.sensor_b + "'");
    PairSample s;
    s.scene_id = rec.scene_id;
    if (rec.label) s.label = *rec.label;
    s.a = patchify(harmonize(read_ssr(rec.path_a), *spec_a.stats), cfg.patch_side, cfg.input_w,
                   cfg.input_h, rec.sensor_a);
    s.b = patchify(harmonize(read_ssr(rec.path_b), *spec_b.stats), cfg.patch_side, cfg.input_w,
                   cfg.input_h, rec.sensor_b);
    return s;
}

struct StepRecord {
    int step = 0;
    double lr = 0;
    double loss = 0;
    double masked_mse = 0;
};

// Single-owner training loop. All randomness is derived by splitting the run
// seed with (purpose, step) tags, so a resumed run continues bit-exactly and
// the loop itself never consumes engine draws.
template <class T>
class TrainerT {
  public:
    TrainerT(ModelConfig model_cfg, OptimConfig optim_cfg, ProjectionBankT<T> bank,
             MaeModelT<T> model, std::vector<PairSample> dataset, int batch_size, uint64_t seed)
        : cfg_(model_cfg),
          bank_(std::move(bank)),
          model_(std::move(model)),
          dataset_(std::move(dataset)),
          batch_size_(batch_size),
          root_(seed) {
        if (dataset_.empty()) throw DataError("trainer: empty dataset");
        if (batch_size_ <= 0) throw DataError("trainer: batch size must be positive");
        std::vector<TensorT<T>> params = bank_.parameters();
        for (auto& p : model_.parameters()) params.push_back(p);
        opt_ = AdamWT<T>(std::move(params), optim_cfg);
    }

    const ModelConfig& model_config() const { return cfg_; }
    const ProjectionBankT<T>& bank() const { return bank_; }
    ProjectionBankT<T>& bank_mut() { return bank_; }
    const MaeModelT<T>& model() const { return model_; }
    MaeModelT<T>& model_mut() { return model_; }
    AdamWT<T>& optimizer() { return opt_; }
    const Rng& root_rng() const { return root_; }
    void set_root_rng(const Rng& r) { root_ = r; }
    int step_count() const { return opt_.step_count(); }

    // Pair indices consumed by a given optimizer step: a stateless view into
    // per-epoch seeded shuffles of the dataset.
    std::vector<int> batch_indices(int step) const {
        const int n = int(dataset_.size());
        std::vector<int> out;
        out.reserve(size_t(batch_size_));
        for (int k = 0; k < batch_size_; ++k) {
            const long slot = long(step) * batch_size_ + k;
            const long epoch = slot / n;
            Rng shuffle_rng = root_.split("data").split(uint64_t(epoch));
            const std::vector<int> perm = shuffle_rng.permutation(n);
            out.push_back(perm[size_t(slot % n)]);
        }
        return out;
    }

    // Forward for one pair under this run's seeded streams for `step`.
    PairForwardT<T> forward_at(int step, int slot, const PairSample& pair) const {
        Rng s = root_.split("step").split(uint64_t(step)).split(uint64_t(slot));
        Rng mix_rng = s.split("mix");
        Rng mask_a_rng = s.split("mask_a");
        Rng mask_b_rng = s.split("mask_b");
        // config mixup ratio = fraction of positions exchanged; the mask's
        // ones mark positions where the first stream keeps its own token.
        MixMask mask = sample_mix_mask(cfg_.n_w(), cfg_.n_h(), 1.0 - cfg_.mixup_ratio, mix_rng);
        MaskPlan plan_a = sample_mask(cfg_.patch_count(), cfg_.mask_ratio, mask_a_rng);
        MaskPlan plan_b = sample_mask(cfg_.patch_count(), cfg_.mask_ratio, mask_b_rng);
        return forward_pair(pair.a, pair.b, model_, bank_, mask, plan_a, plan_b);
    }

    StepRecord train_step() {
        const int step = opt_.step_count();
        opt_.zero_grad();
        const std::vector<int> batch = batch_indices(step);
        TensorT<T> loss;
        double mse_sum = 0;
        for (int k = 0; k < batch_size_; ++k) {
            PairForwardT<T> fw = forward_at(step, k, dataset_[size_t(batch[size_t(k)])]);
            mse_sum += fw.masked_mse();
            loss = k == 0 ? fw.loss : add(loss, fw.loss);
        }
        if (batch_size_ > 1) loss = scale(loss, T(1.0 / batch_size_));
        const double loss_val = double(loss.item());
        if (!std::isfinite(loss_val))
            throw InvariantError("NaN/Inf training loss at step " + std::to_string(step) +
                                 " (batch of " + std::to_string(batch_size_) + ")");
        StepRecord rec;
        rec.step = step;
        rec.lr = opt_.current_lr();
        rec.loss = loss_val;
        rec.masked_mse = mse_sum / batch_size_;
        loss.backward();
        opt_.step();
        return rec;
    }

    std::vector<StepRecord> run(int steps, const std::function<void(const StepRecord&)>& on_step = {}) {
        std::vector<StepRecord> trace;
        trace.reserve(size_t(steps));
        for (int i = 0; i < steps; ++i) {
            trace.push_back(train_step());
            if (on_step) on_step(trace.back());
        }
        return trace;
    }

    // Frozen-model loss over the whole dataset under a fixed evaluation tag.
    double evaluate(uint64_t tag = 0) const {
        NoGradGuard ng;
        double total = 0;
        for (size_t i = 0; i < dataset_.size(); ++i) {
            Rng s = root_.split("eval").split(tag).split(uint64_t(i));
            Rng mix_rng = s.split("mix");
            Rng mask_a_rng = s.split("mask_a");
            Rng mask_b_rng = s.split("mask_b");
            MixMask mask = sample_mix_mask(cfg_.n_w(), cfg_.n_h(), 1.0 - cfg_.mixup_ratio, mix_rng);
            MaskPlan plan_a = sample_mask(cfg_.patch_count(), cfg_.mask_ratio, mask_a_rng);
            MaskPlan plan_b = sample_mask(cfg_.patch_count(), cfg_.mask_ratio, mask_b_rng);
            total += double(
                forward_pair(dataset_[i].a, dataset_[i].b, model_, bank_, mask, plan_a, plan_b)
                    .loss.item());
        }
        return total / double(dataset_.size());
    }

  private:
    ModelConfig cfg_;
    ProjectionBankT<T> bank_;
    MaeModelT<T> model_;
    std::vector<PairSample> dataset_;
    int batch_size_ = 1;
    Rng root_;
    AdamWT<T> opt_;
};

using Trainer = TrainerT<double>;

// ---------------------------------------------------------------------------
// Checkpoint container. Layout (little-endian):
//   "SMC1" | u16 version=1 | u8 scalar_bytes (4|8) | u8 flags (bit0: optimizer)
//   | u32 json_len | config-echo JSON (UTF-8)
//   | u32 json_len | registry JSON (bank dims + sensors + band->layer ids)
//   | u32 n_layers x { u32 id | f64 lambda_min | f64 lambda_max
//                      | 4 tensors (proj_w, proj_b, reproj_w, reproj_b) }
//   | u32 n_params x { u16 name_len | name | u8 ndim | u32 dims... | scalars }
//   | [optimizer: u64 step_count | per param (m scalars, v scalars)]
//   | u32 rng_len | RNG state text
// Tensor scalars are raw little-endian f32/f64 per scalar_bytes.
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void put_scalars(std::string& out, const std::vector<T>& v) {
    for (T x : v) {
        if constexpr (sizeof(T) == 4)
            put_f32(out, float(x));
        else
            put_f64(out, double(x));
    }
}

template <class T>
void read_scalars(ByteReader& rd, std::vector<T>& v) {
    for (auto& x : v) {
        if constexpr (sizeof(T) == 4)
            x = T(rd.f32());
        else
            x = T(rd.f64());
    }
}

template <class T>
void put_tensor(std::string& out, const TensorT<T>& t) {
    put_scalars(out, t.values());
}

}  // namespace detail

template <class T>
std::string encode_checkpoint(const ModelConfig& cfg, const json& config_echo,
                              const ProjectionBankT<T>& bank, const MaeModelT<T>& model,
                              AdamWT<T>* opt, const Rng& rng) {
    std::string out;
    out += "SMC1";
    put_u16(out, 1);
    out.push_back(char(sizeof(T)));
    out.push_back(char(opt != nullptr ? 1 : 0));

    json echo = config_echo;
    echo["model"] = {{"embed_dim", cfg.embed_dim},
                     {"depth", cfg.depth},
                     {"heads", cfg.heads},
                     {"decoder_dim", cfg.decoder_dim},
                     {"decoder_depth", cfg.decoder_depth},
                     {"decoder_heads", cfg.decoder_heads},
                     {"patch_side", cfg.patch_side},
                     {"input_size", {cfg.input_w, cfg.input_h}},
                     {"mask_ratio", cfg.mask_ratio},
                     {"mixup_ratio", cfg.mixup_ratio},
                     {"c_max", cfg.c_max},
                     {"seed", cfg.seed}};
    const std::string echo_s = echo.dump();
    put_u32(out, uint32_t(echo_s.size()));
    out += echo_s;

    json registry;
    registry["embed_dim"] = bank.embed_dim();
    registry["patch_side"] = bank.patch_side();
    registry["c_max"] = bank.c_max();
    registry["sensors"] = json::array();
    for (const auto& [name, spec] : bank.sensors()) {
        json sj = sensor_spec_to_json(spec);
        sj["layers"] = bank.assignment(name);
        registry["sensors"].push_back(sj);
    }
    const std::string reg_s = registry.dump();
    put_u32(out, uint32_t(reg_s.size()));
    out += reg_s;

    put_u32(out, uint32_t(bank.layer_count()));
    for (const auto& l : bank.layers()) {
        put_u32(out, uint32_t(l.id));
        put_f64(out, l.range.lambda_min_nm);
        put_f64(out, l.range.lambda_max_nm);
        detail::put_tensor(out, l.proj_w);
        detail::put_tensor(out, l.proj_b);
        detail::put_tensor(out, l.reproj_w);
        detail::put_tensor(out, l.reproj_b);
    }

    const auto named = model.named_parameters();
    put_u32(out, uint32_t(named.size()));
    for (const auto& [name, t] : named) {
        put_u16(out, uint16_t(name.size()));
        out += name;
        out.push_back(char(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) put_u32(out, uint32_t(t.dim(i)));
        detail::put_tensor(out, t);
    }

    if (opt) {
        put_u64(out, uint64_t(opt->step_count()));
        auto& m = opt->first_moments();
        auto& v = opt->second_moments();
        for (size_t i = 0; i < m.size(); ++i) {
            detail::put_scalars(out, m[i]);
            detail::put_scalars(out, v[i]);
        }
    }

    const std::string rng_s = rng.save_state();
    put_u32(out, uint32_t(rng_s.size()));
    out += rng_s;
    return out;
}

template <class T>
struct CheckpointT {
    json config_echo;
    ModelConfig model_config;
    ProjectionBankT<T> bank;
    MaeModelT<T> model;
    bool has_optimizer = false;
    int optimizer_step = 0;
    std::vector<std::vector<T>> opt_m, opt_v;
    Rng rng{0};
};

template <class T>
CheckpointT<T> decode_checkpoint(const std::string& buf) {
    if (buf.size() < 4 || buf.compare(0, 4, "SMC1") != 0)
        throw DataError("bad checkpoint magic at offset 0");
    ByteReader rd(buf.data() + 4, buf.size() - 4);
    const uint16_t version = rd.u16();
    if (version != 1) throw DataError("unsupported checkpoint version " + std::to_string(version));
    const uint8_t scalar_bytes = uint8_t(rd.bytes(1)[0]);
    if (scalar_bytes != sizeof(T))
        throw DataError("checkpoint precision (" + std::to_string(scalar_bytes * 8) +
                        "-bit) does not match this reader");
    const uint8_t flags = uint8_t(rd.bytes(1)[0]);

    CheckpointT<T> ck;
    ck.config_echo = json::parse(rd.bytes(rd.u32()));
    const json mj = ck.config_echo.at("model");
    ModelConfig& mc = ck.model_config;
    mc.embed_dim = mj.at("embed_dim").get<int>();
    mc.depth = mj.at("depth").get<int>();
    mc.heads = mj.at("heads").get<int>();
    mc.decoder_dim = mj.at("decoder_dim").get<int>();
    mc.decoder_depth = mj.at("decoder_depth").get<int>();
    mc.decoder_heads = mj.at("decoder_heads").get<int>();
    mc.patch_side = mj.at("patch_side").get<int>();
    mc.input_w = mj.at("input_size").at(0).get<int>();
    mc.input_h = mj.at("input_size").at(1).get<int>();
    mc.mask_ratio = mj.at("mask_ratio").get<double>();
    mc.mixup_ratio = mj.at("mixup_ratio").get<double>();
    mc.c_max = mj.at("c_max").get<int>();
    mc.seed = mj.at("seed").get<uint64_t>();
    mc.validate();

    const json registry = json::parse(rd.bytes(rd.u32()));
    ck.bank = ProjectionBankT<T>(registry.at("embed_dim").get<int>(),
                                 registry.at("patch_side").get<int>(),
                                 registry.at("c_max").get<int>());

    const uint32_t n_layers = rd.u32();
    Rng dummy(0);
    for (uint32_t i = 0; i < n_layers; ++i) {
        const int id = int(rd.u32());
        SpectralRange range{rd.f64(), rd.f64()};
        const int new_id = ck.bank.add_layer(range, dummy);
        if (new_id != id) throw DataError("checkpoint layer ids are not sequential");
        auto& layer = ck.bank.layer_mut(id);
        detail::read_scalars(rd, layer.proj_w.values());
        detail::read_scalars(rd, layer.proj_b.values());
        detail::read_scalars(rd, layer.reproj_w.values());
        detail::read_scalars(rd, layer.reproj_b.values());
    }
    for (const auto& sj : registry.at("sensors")) {
        json spec_j = sj;
        std::vector<int> assignment = spec_j.at("layers").get<std::vector<int>>();
        spec_j.erase("layers");
        SensorSpec spec = sensor_spec_from_json(spec_j);
        for (int id : assignment)
            if (id < 1 || id > ck.bank.layer_count())
                throw DataError("checkpoint sensor assignment references missing layer");
        ck.bank.restore_registered(spec, std::move(assignment));
    }

    Rng init_rng(mc.seed);
    ck.model = MaeModelT<T>::init(mc, init_rng);
    auto named = ck.model.named_parameters();
    const uint32_t n_params = rd.u32();
    if (n_params != named.size()) throw DataError("checkpoint parameter count mismatch");
    for (uint32_t i = 0; i < n_params; ++i) {
        const std::string name = rd.bytes(rd.u16());
        if (name != named[i].first)
            throw DataError("checkpoint parameter order mismatch at '" + name + "'");
        const int ndim = int(uint8_t(rd.bytes(1)[0]));
        std::vector<int> dims(size_t(ndim));
        for (auto& dv : dims) dv = int(rd.u32());
        if (dims != named[i].second.shape())
            throw DataError("checkpoint parameter shape mismatch at '" + name + "'");
        detail::read_scalars(rd, named[i].second.values());
    }

    ck.has_optimizer = (flags & 1) != 0;
    if (ck.has_optimizer) {
        ck.optimizer_step = int(rd.u64());
        std::vector<TensorT<T>> params = ck.bank.parameters();
        for (auto& p : ck.model.parameters()) params.push_back(p);
        ck.opt_m.resize(params.size());
        ck.opt_v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            ck.opt_m[i].assign(params[i].size(), T(0));
            ck.opt_v[i].assign(params[i].size(), T(0));
            detail::read_scalars(rd, ck.opt_m[i]);
            detail::read_scalars(rd, ck.opt_v[i]);
        }
    }
    ck.rng = Rng::restore_state(rd.bytes(rd.u32()));
    if (!rd.done()) throw DataError("trailing bytes after checkpoint payload");
    return ck;
}

template <class T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const json& config_echo,
                     const ProjectionBankT<T>& bank, const MaeModelT<T>& model, AdamWT<T>* opt,
                     const Rng& rng) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    const std::string buf = encode_checkpoint(cfg, config_echo, bank, model, opt, rng);
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw DataError("short checkpoint write: " + path);
}

template <class T>
CheckpointT<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint<T>(buf);
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

// Rebuilds a trainer from a checkpoint so training resumes bit-exactly.
template <class T>
TrainerT<T> resume_trainer(CheckpointT<T>& ck, const OptimConfig& optim_cfg,
                           std::vector<PairSample> dataset, int batch_size) {
    TrainerT<T> trainer(ck.model_config, optim_cfg, ck.bank, ck.model, std::move(dataset),
                        batch_size, ck.model_config.seed);
    if (ck.has_optimizer) {
        trainer.optimizer().set_step_count(ck.optimizer_step);
        trainer.optimizer().first_moments() = ck.opt_m;
        trainer.optimizer().second_moments() = ck.opt_v;
    }
    trainer.set_root_rng(ck.rng);
    return trainer;
}

}  // namespace smarties
