#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "attention.hpp"
#include "tensor.hpp"

namespace zepo {

enum class Stage { down, mid, up };

inline std::string_view to_string(Stage s) {
    switch (s) {
    case Stage::down: return "down";
    case Stage::mid: return "mid";
    case Stage::up: return "up";
    }
    return "?";
}

inline Stage parse_stage(std::string_view s) {
    if (s == "down") return Stage::down;
    if (s == "mid") return Stage::mid;
    if (s == "up") return Stage::up;
    throw std::invalid_argument("unknown stage '" + std::string(s) + "' (expected down|mid|up)");
}

/// A self-attention block inside the noise predictor. The token grid at this site is the
/// latent grid divided by `stride` in each direction.
struct AttentionSite {
    std::string layer_id;
    int stride = 1;
    int feature_dim = 0;
    Stage stage = Stage::mid;

    int resolution(int latent_side) const { return latent_side / stride; }
    int token_count(int latent_height, int latent_width) const {
        return (latent_height / stride) * (latent_width / stride);
    }

    friend bool operator==(const AttentionSite&, const AttentionSite&) = default;
};

struct ConditionSpec {
    std::string prompt = "head";
    double guidance_scale = 2.0;
    std::string uncond_prompt;
};

/// Per-site linear maps: query/key/value from the pre-projection hidden state, out back to it.
struct AttentionProjections {
    Matrix query;
    Matrix key;
    Matrix value;
    Matrix out;
};

struct ProcessorContext {
    const AttentionProjections& projections;
    int timestep = 0;
    int grid_height = 0;
    int grid_width = 0;
    AttentionMeter* meter = nullptr;
};

/// Replaces the attention product at a site. Receives projected q/k/v of the current
/// hidden state and must return a sequence shaped like q (before the output projection).
class AttentionProcessor {
public:
    virtual ~AttentionProcessor() = default;
    virtual std::string name() const = 0;
    virtual FeatureSeq process(const AttentionSite& site, const FeatureSeq& q, const FeatureSeq& k,
                               const FeatureSeq& v, ProcessorContext& ctx) const = 0;
};

/// Runs plain attention and records its shape with the meter.
inline FeatureSeq metered_attention(const AttentionSite& site, std::string_view processor, const FeatureSeq& q,
                                    const FeatureSeq& k, const FeatureSeq& v, AttentionMeter* meter) {
    FeatureSeq out = scaled_dot_attention(q, k, v);
    if (meter) meter->record({site.layer_id, std::string(processor), q.batch(), q.tokens(), k.tokens(), k.dim(), v.dim()});
    return out;
}

class PlainAttention final : public AttentionProcessor {
public:
    std::string name() const override { return "plain"; }
    FeatureSeq process(const AttentionSite& site, const FeatureSeq& q, const FeatureSeq& k, const FeatureSeq& v,
                       ProcessorContext& ctx) const override {
        return metered_attention(site, name(), q, k, v, ctx.meter);
    }
};

/// Adapts a callable into a processor.
class LambdaProcessor final : public AttentionProcessor {
public:
    using Fn = std::function<FeatureSeq(const AttentionSite&, const FeatureSeq&, const FeatureSeq&,
                                        const FeatureSeq&, ProcessorContext&)>;
    LambdaProcessor(std::string name, Fn fn) : name_(std::move(name)), fn_(std::move(fn)) {}
    std::string name() const override { return name_; }
    FeatureSeq process(const AttentionSite& site, const FeatureSeq& q, const FeatureSeq& k, const FeatureSeq& v,
                       ProcessorContext& ctx) const override {
        return fn_(site, q, k, v, ctx);
    }

private:
    std::string name_;
    Fn fn_;
};

inline std::shared_ptr<const AttentionProcessor> make_processor(std::string name, LambdaProcessor::Fn fn) {
    return std::make_shared<LambdaProcessor>(std::move(name), std::move(fn));
}

using FeatureTap = std::function<void(const AttentionSite&, const FeatureSeq& hidden, int grid_h, int grid_w)>;

/// Per-evaluation state threaded through the network: processor routes, feature taps, instrumentation.
struct EvalContext {
    std::map<std::string, std::shared_ptr<const AttentionProcessor>> routes;
    FeatureTap feature_tap;
    AttentionMeter* meter = nullptr;
    std::vector<std::string>* call_log = nullptr;
};

/// Noise-prediction network. Adapters for pretrained models implement this contract:
///  - evaluate() returns a latent shaped like its input;
///  - sites() lists every self-attention block, stable across calls, in execution order;
///  - each site hands its normalised hidden state to ctx.feature_tap before projecting it,
///    and routes the attention product through dispatch_attention();
///  - guidance_embedded() is true when the model consumes the guidance scale itself
///    (one evaluation per step instead of two).
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;

    virtual const std::vector<AttentionSite>& sites() const = 0;
    virtual LatentTensor evaluate(const LatentTensor& zt, int t, const ConditionSpec& cond, EvalContext& ctx) const = 0;
    virtual bool guidance_embedded() const { return false; }
    virtual bool thread_safe() const { return true; }
    virtual std::string name() const = 0;

    LatentTensor predict(const LatentTensor& zt, int t, const ConditionSpec& cond) const {
        EvalContext ctx;
        return evaluate(zt, t, cond, ctx);
    }

    const AttentionSite* find_site(std::string_view id) const {
        for (const auto& s : sites())
            if (s.layer_id == id) return &s;
        return nullptr;
    }
};

using NoisePredictorPtr = std::shared_ptr<const NoisePredictor>;

/// Attention product at a site, honouring any processor routed there.
inline FeatureSeq dispatch_attention(const AttentionSite& site, const FeatureSeq& q, const FeatureSeq& k,
                                     const FeatureSeq& v, const AttentionProjections& proj, int t, int grid_h,
                                     int grid_w, EvalContext& ctx) {
    ProcessorContext pctx{proj, t, grid_h, grid_w, ctx.meter};
    auto it = ctx.routes.find(site.layer_id);
    FeatureSeq out;
    std::string used;
    if (it != ctx.routes.end() && it->second) {
        out = it->second->process(site, q, k, v, pctx);
        used = it->second->name();
    } else {
        out = metered_attention(site, "plain", q, k, v, ctx.meter);
        used = "plain";
    }
    if (out.batch() != q.batch() || out.tokens() != q.tokens() || out.dim() != v.dim()) {
        throw std::runtime_error("processor '" + used + "' at " + site.layer_id + " returned a mis-shaped sequence");
    }
    if (ctx.call_log) ctx.call_log->push_back(site.layer_id + ":" + used);
    return out;
}

/// Predicate over attention sites, with a printable description for configs and records.
struct LayerSelector {
    std::function<bool(const AttentionSite&)> matches;
    std::string description;

    static LayerSelector all() {
        return {[](const AttentionSite&) { return true; }, "all"};
    }
    static LayerSelector none() {
        return {[](const AttentionSite&) { return false; }, "none"};
    }
    static LayerSelector stages(std::vector<Stage> stages) {
        std::string desc;
        for (Stage s : stages) desc += (desc.empty() ? "" : ",") + std::string(to_string(s));
        return {[stages](const AttentionSite& site) { return std::ranges::find(stages, site.stage) != stages.end(); },
                desc};
    }
    static LayerSelector ids(std::vector<std::string> ids) {
        std::string desc = "id:";
        for (std::size_t i = 0; i < ids.size(); ++i) desc += (i ? "," : "") + ids[i];
        return {[ids](const AttentionSite& site) { return std::ranges::find(ids, site.layer_id) != ids.end(); },
                desc};
    }
};

/// Parses "all", "none", "id:a,b" or a comma-separated stage list such as "mid,up".
inline LayerSelector parse_selector(std::string_view text) {
    auto split = [](std::string_view s) {
        std::vector<std::string> parts;
        std::stringstream ss{std::string(s)};
        for (std::string item; std::getline(ss, item, ',');) {
            item.erase(0, item.find_first_not_of(" \t"));
            item.erase(item.find_last_not_of(" \t") + 1);
            if (!item.empty()) parts.push_back(item);
        }
        return parts;
    };
    if (text == "all") return LayerSelector::all();
    if (text == "none" || text.empty()) return LayerSelector::none();
    if (text.starts_with("id:")) return LayerSelector::ids(split(text.substr(3)));
    std::vector<Stage> stages;
    for (const auto& part : split(text)) stages.push_back(parse_stage(part));
    return LayerSelector::stages(stages);
}

/// A network whose matched sites are routed through processors. Views never mutate their base.
class ProcessorView final : public NoisePredictor {
public:
    ProcessorView(NoisePredictorPtr base, std::map<std::string, std::shared_ptr<const AttentionProcessor>> routes)
        : base_(std::move(base)), routes_(std::move(routes)) {}

    const std::vector<AttentionSite>& sites() const override { return base_->sites(); }
    bool guidance_embedded() const override { return base_->guidance_embedded(); }
    bool thread_safe() const override { return base_->thread_safe(); }
    std::string name() const override { return base_->name(); }

    LatentTensor evaluate(const LatentTensor& zt, int t, const ConditionSpec& cond, EvalContext& ctx) const override {
        EvalContext inner = ctx;
        for (const auto& [id, proc] : routes_) inner.routes.try_emplace(id, proc);
        return base_->evaluate(zt, t, cond, inner);
    }

    const NoisePredictorPtr& base() const { return base_; }
    const std::map<std::string, std::shared_ptr<const AttentionProcessor>>& routes() const { return routes_; }

private:
    NoisePredictorPtr base_;
    std::map<std::string, std::shared_ptr<const AttentionProcessor>> routes_;
};

/// Returns a view of `net` where every site matched by `selector` uses `proc`.
inline NoisePredictorPtr register_processor(const NoisePredictorPtr& net, const LayerSelector& selector,
                                            std::shared_ptr<const AttentionProcessor> proc) {
    if (!net) throw std::invalid_argument("register_processor: null network");
    if (!proc) throw std::invalid_argument("register_processor: null processor");
    NoisePredictorPtr base = net;
    std::map<std::string, std::shared_ptr<const AttentionProcessor>> routes;
    if (auto view = std::dynamic_pointer_cast<const ProcessorView>(net)) {
        base = view->base();
        routes = view->routes();
    }
    int matched = 0;
    for (const auto& site : net->sites()) {
        if (selector.matches && selector.matches(site)) {
            routes[site.layer_id] = proc;
            ++matched;
        }
    }
    if (matched == 0) {
        throw std::invalid_argument("register_processor: selector '" + selector.description + "' matches no site");
    }
    return std::make_shared<ProcessorView>(base, std::move(routes));
}

/// Removes routes for matched sites; with everything removed the base network itself is returned.
inline NoisePredictorPtr unregister_processor(const NoisePredictorPtr& net, const LayerSelector& selector) {
    auto view = std::dynamic_pointer_cast<const ProcessorView>(net);
    if (!view) return net;
    auto routes = view->routes();
    for (const auto& site : net->sites())
        if (selector.matches && selector.matches(site)) routes.erase(site.layer_id);
    if (routes.empty()) return view->base();
    return std::make_shared<ProcessorView>(view->base(), std::move(routes));
}

/// Classifier-free guidance: eps_u + s (eps_c - eps_u). One evaluation when s == 1 or the
/// model embeds guidance itself.
inline LatentTensor predict_with_cfg(const NoisePredictor& net, const LatentTensor& zt, int t,
                                     const ConditionSpec& cond, EvalContext& ctx) {
    if (cond.guidance_scale < 0.0) throw std::invalid_argument("predict_with_cfg: guidance_scale must be >= 0");
    if (cond.guidance_scale == 1.0 || net.guidance_embedded()) return net.evaluate(zt, t, cond, ctx);

    ConditionSpec uncond = cond;
    uncond.prompt = cond.uncond_prompt;
    LatentTensor eps_c = net.evaluate(zt, t, cond, ctx);
    LatentTensor eps_u = net.evaluate(zt, t, uncond, ctx);
    const double s = cond.guidance_scale;
    for (std::size_t i = 0; i < eps_c.size(); ++i) eps_c[i] = eps_u[i] + s * (eps_c[i] - eps_u[i]);
    return eps_c;
}

inline LatentTensor predict_with_cfg(const NoisePredictor& net, const LatentTensor& zt, int t,
                                     const ConditionSpec& cond) {
    EvalContext ctx;
    return predict_with_cfg(net, zt, t, cond, ctx);
}

} // namespace zepo
