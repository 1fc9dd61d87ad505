#include "bgnn/model.hpp"

#include <array>
#include <sstream>

namespace bgnn {

namespace {

const std::set<std::string> kSpecKeys{
    "preset",     "name",       "in_dim",         "points",         "k",       "classes",
    "convs",      "embedding",  "mlp",            "activation",     "act_quant",
    "weight_quant", "edge_balance", "global_balance", "rescale",     "dropout"};

std::string layer_text(const LayerSpec& l) {
    std::string s = to_string(l.kind) + ":" + std::to_string(l.width);
    if (l.binary_outputs) s += ":binary_out";
    return s;
}

std::string layers_text(const std::vector<LayerSpec>& ls) {
    std::string s;
    for (const auto& l : ls) s += (s.empty() ? "" : ",") + layer_text(l);
    return s;
}

LayerSpec parse_layer(const std::string& text) {
    const auto parts = split(text, ':');
    if (parts.size() < 2 || parts.size() > 3)
        throw ConfigError("layer '" + text + "': expected kind:width[:binary_out]");
    LayerSpec l;
    l.kind = parse_layer_kind(parts[0]);
    try {
        std::size_t used = 0;
        const long long w = std::stoll(parts[1], &used);
        if (used != parts[1].size() || w <= 0) throw std::invalid_argument(parts[1]);
        l.width = static_cast<std::size_t>(w);
    } catch (const std::exception&) {
        throw ConfigError("layer '" + text + "': width must be a positive integer");
    }
    if (parts.size() == 3) {
        if (parts[2] != "binary_out")
            throw ConfigError("layer '" + text + "': unknown option '" + parts[2] + "'");
        l.binary_outputs = true;
    }
    return l;
}

std::vector<LayerSpec> parse_layers(const std::string& text) {
    std::vector<LayerSpec> out;
    if (trim(text).empty()) return out;
    for (const auto& item : split(text, ',')) out.push_back(parse_layer(item));
    return out;
}

std::size_t positive(const ConfigSection& s, const std::string& key, std::size_t fallback) {
    const auto v = s.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(key + " must be non-negative");
    return static_cast<std::size_t>(v);
}

bool produces_binary(const LayerSpec& l) {
    return is_xor(l.kind) || (l.kind == LayerKind::binedgeconv && l.binary_outputs);
}

}  // namespace

bool ModelSpec::binary() const noexcept {
    for (const auto& c : convs)
        if (has_binary_weights(c.kind)) return true;
    if (has_binary_weights(embedding.kind)) return true;
    for (const auto& m : mlp)
        if (has_binary_weights(m.kind)) return true;
    return false;
}

void ModelSpec::validate() const {
    auto fail = [&](const std::string& msg) { throw ConfigError("model '" + name + "': " + msg); };
    if (in_dim == 0) fail("in_dim must be positive");
    if (classes < 2) fail("need at least two classes");
    if (points < 2) fail("need at least two points per graph");
    if (k == 0 || k >= points) fail("k must satisfy 1 <= k <= points - 1");
    if (convs.empty()) fail("at least one graph layer is required");
    for (std::size_t i = 0; i < convs.size(); ++i) {
        const auto& c = convs[i];
        if (!is_graph_layer(c.kind)) fail("convs[" + std::to_string(i) + "] is not a graph layer");
        if (c.width == 0) fail("zero-width graph layer");
        if (c.binary_outputs && c.kind != LayerKind::binedgeconv)
            fail("binary_out applies to binedgeconv only");
        if (is_xor(c.kind) && (i == 0 || !produces_binary(convs[i - 1])))
            fail("xoredgeconv layer " + std::to_string(i) +
                 " must follow a layer producing binary features");
    }
    if (is_graph_layer(embedding.kind) || embedding.width == 0) fail("embedding must be a dense layer");
    for (const auto& m : mlp)
        if (is_graph_layer(m.kind) || m.width == 0) fail("mlp layers must be dense");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
    if (binary()) {
        if (act_quant == Quantizer::identity) fail("binary layers need an activation quantizer");
    } else if (act_quant != Quantizer::identity || weight_quant != Quantizer::identity) {
        fail("a real-valued model cannot carry quantizers");
    }
}

std::string ModelSpec::to_text() const {
    std::ostringstream o;
    o << "name = " << name << "\n"
      << "in_dim = " << in_dim << "\n"
      << "points = " << points << "\n"
      << "k = " << k << "\n"
      << "classes = " << classes << "\n"
      << "convs = " << layers_text(convs) << "\n"
      << "embedding = " << layer_text(embedding) << "\n"
      << "mlp = " << layers_text(mlp) << "\n"
      << "activation = " << to_string(activation) << "\n"
      << "act_quant = " << to_string(act_quant) << "\n"
      << "weight_quant = " << to_string(weight_quant) << "\n"
      << "edge_balance = " << to_string(edge_balance) << "\n"
      << "global_balance = " << to_string(global_balance) << "\n"
      << "rescale = " << to_string(rescale) << "\n";
    std::ostringstream d;
    d.precision(17);
    d << dropout;
    o << "dropout = " << d.str() << "\n";
    return o.str();
}

ModelSpec ModelSpec::from_section(const ConfigSection& s) {
    s.reject_unknown(kSpecKeys);
    ModelSpec m = s.has("preset") ? preset(s.get("preset", "")) : ModelSpec{};
    m.name = s.get("name", m.name);
    m.in_dim = positive(s, "in_dim", m.in_dim);
    m.points = positive(s, "points", m.points);
    m.k = positive(s, "k", m.k);
    m.classes = positive(s, "classes", m.classes);
    if (s.has("convs")) m.convs = parse_layers(s.get("convs", ""));
    if (s.has("embedding")) m.embedding = parse_layer(s.get("embedding", ""));
    if (s.has("mlp")) m.mlp = parse_layers(s.get("mlp", ""));
    if (s.has("activation")) m.activation = parse_activation(s.get("activation", ""));
    if (s.has("act_quant")) m.act_quant = parse_quantizer(s.get("act_quant", ""));
    if (s.has("weight_quant")) m.weight_quant = parse_quantizer(s.get("weight_quant", ""));
    if (s.has("edge_balance")) m.edge_balance = parse_balance(s.get("edge_balance", ""));
    if (s.has("global_balance")) m.global_balance = parse_balance(s.get("global_balance", ""));
    if (s.has("rescale")) m.rescale = parse_rescale(s.get("rescale", ""));
    m.dropout = s.get_double("dropout", m.dropout);
    m.validate();
    return m;
}

ModelSpec ModelSpec::from_text(const std::string& text) {
    return from_section(Config::parse(text, "<model spec>").section(""));
}

ModelSpec ModelSpec::preset(const std::string& name) {
    const auto dash = name.find('-');
    if (dash == std::string::npos) throw ConfigError("unknown model preset '" + name + "'");
    const std::string variant = name.substr(0, dash);
    const std::string size = name.substr(dash + 1);
    ModelSpec m;
    m.name = name;
    std::vector<std::size_t> conv_w;
    std::size_t emb = 0;
    std::vector<std::size_t> mlp_w;
    if (size == "mini") {
        m.points = 128;
        m.k = 10;
        m.classes = 3;
        conv_w = {32, 64};
        emb = 128;
        mlp_w = {64, 32};
    } else if (size == "dgcnn40") {
        m.points = 1024;
        m.k = 20;
        m.classes = 40;
        conv_w = {64, 64, 128, 256};
        emb = 1024;
        mlp_w = {512, 256};
    } else {
        throw ConfigError("unknown model preset size '" + size + "' (mini|dgcnn40)");
    }

    LayerKind conv_kind, dense_kind;
    if (variant == "float") {
        conv_kind = LayerKind::edgeconv;
        dense_kind = LayerKind::dense;
        m.activation = Activation::relu;
    } else if (variant == "rf" || variant == "bf1" || variant == "bf2") {
        conv_kind = variant == "rf"    ? LayerKind::binedgeconv
                    : variant == "bf1" ? LayerKind::xoredgeconv_bf1
                                       : LayerKind::xoredgeconv_bf2;
        dense_kind = LayerKind::binary_dense;
        m.activation = Activation::prelu;
        m.act_quant = Quantizer::sign;
        m.weight_quant = Quantizer::sign;
    } else {
        throw ConfigError("unknown model preset variant '" + variant + "' (float|rf|bf1|bf2)");
    }
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
        if (i == 0 && is_xor(conv_kind))
            m.convs.push_back({LayerKind::binedgeconv, conv_w[i], true});
        else
            m.convs.push_back({conv_kind, conv_w[i], false});
    }
    m.embedding = {dense_kind, emb, false};
    for (auto w : mlp_w) m.mlp.push_back({dense_kind, w, false});
    m.validate();
    return m;
}

std::vector<std::size_t> transfer_points(const ModelSpec& spec) {
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i < spec.convs.size(); ++i) out.push_back(i);
    return out;
}

ForwardProfile::Scope::Scope(ForwardProfile* p, const char* category)
    : profile_(p), category_(category) {
    if (profile_) start_ = std::chrono::steady_clock::now();
}

ForwardProfile::Scope::~Scope() {
    if (!profile_) return;
    const std::chrono::duration<double> d = std::chrono::steady_clock::now() - start_;
    profile_->seconds[category_] += d.count();
}

template <typename T>
Model<T> Model<T>::init(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m;
    m.spec = spec;
    std::mt19937_64 rng(seed);
    std::size_t in = spec.in_dim;
    std::size_t concat = 0;
    for (const auto& c : spec.convs) {
        LayerFlags f;
        f.activation = spec.activation;
        f.edge_balance = spec.edge_balance;
        f.binary_outputs = c.binary_outputs;
        f.knn_metric = is_xor(c.kind) ? KnnMetric::hamming_matmul : KnnMetric::l2;
        m.convs.push_back(make_layer<T>(c.kind, in, c.width, f, spec.rescale, spec.points, spec.k,
                                        false, rng));
        in = c.width;
        concat += c.width;
    }
    LayerFlags df;
    df.activation = spec.activation;
    m.embedding = make_layer<T>(spec.embedding.kind, concat, spec.embedding.width, df,
                                RescaleKind::channel_wise, 0, 0, false, rng);
    in = 2 * spec.embedding.width;
    for (const auto& l : spec.mlp) {
        m.mlp.push_back(make_layer<T>(l.kind, in, l.width, df, RescaleKind::channel_wise, 0, 0,
                                      false, rng));
        in = l.width;
    }
    LayerFlags hf;
    hf.activation = Activation::none;
    hf.binary_inputs = spec.binary();
    m.head = make_layer<T>(LayerKind::dense, in, spec.classes, hf, RescaleKind::channel_wise, 0, 0,
                           true, rng);
    return m;
}

template <typename T>
LayerContext<T> Model<T>::context(bool training, bool allow_packed) const {
    LayerContext<T> ctx;
    ctx.training = training;
    ctx.act_quant = spec.act_quant;
    ctx.weight_quant = spec.weight_quant;
    ctx.graph_size = spec.points;
    ctx.global_balance = spec.global_balance;
    ctx.allow_packed = allow_packed;
    return ctx;
}

template <typename T>
ForwardResult<T> Model<T>::forward(Tape<T>& t, const Tensor<T>& points, const ForwardOptions<T>& opt) {
    if (points.ndim() != 2 || points.cols() != spec.in_dim)
        throw ShapeError("model expects " + std::to_string(spec.in_dim) +
                         " input features per point, got shape " + shape_string(points.shape()));
    if (points.rows() == 0 || points.rows() % spec.points != 0)
        throw ShapeError("input rows " + std::to_string(points.rows()) +
                         " are not a whole number of " + std::to_string(spec.points) +
                         "-point clouds");
    if (opt.fixed_topologies && opt.fixed_topologies->size() != convs.size())
        throw ShapeError("fixed topologies: one per graph layer required");
    const LayerContext<T> ctx = context(opt.training, opt.allow_packed);
    ForwardResult<T> r;
    ForwardProfile* prof = opt.profile;
    Var x = t.constant(points);
    for (std::size_t l = 0; l < convs.size(); ++l) {
        GraphTopology topo;
        if (opt.fixed_topologies) {
            topo = (*opt.fixed_topologies)[l];
        } else {
            ForwardProfile::Scope s(prof, "knn");
            topo = knn_batched(t.value(x), spec.points, spec.k, convs[l].flags.knn_metric);
        }
        {
            ForwardProfile::Scope s(prof, "graph_conv");
            x = layer::graph_forward(t, x, topo, convs[l], ctx);
        }
        r.conv_outputs.push_back(x);
        r.topologies.push_back(std::move(topo));
    }
    Var h;
    {
        ForwardProfile::Scope s(prof, "concat");
        h = r.conv_outputs.size() == 1 ? r.conv_outputs[0]
                                       : ad::concat_cols(t, std::span<const Var>(r.conv_outputs));
    }
    {
        ForwardProfile::Scope s(prof, "embedding");
        h = layer::dense_forward(t, h, embedding, ctx);
    }
    {
        ForwardProfile::Scope s(prof, "pool");
        std::array<Var, 2> pooled{ad::global_max_pool(t, h, spec.points),
                                  ad::global_avg_pool(t, h, spec.points)};
        h = ad::concat_cols(t, std::span<const Var>(pooled));
    }
    ForwardProfile::Scope s(prof, "classifier");
    const bool drop = opt.training && opt.rng && spec.dropout > 0.0;
    for (auto& layer_p : mlp) {
        h = layer::dense_forward(t, h, layer_p, ctx);
        if (drop) {
            const auto& H = t.value(h);
            Tensor<T> mask(H.shape());
            const T keep_scale = static_cast<T>(1.0 / (1.0 - spec.dropout));
            std::bernoulli_distribution keep(1.0 - spec.dropout);
            for (auto& v : mask.storage()) v = keep(*opt.rng) ? keep_scale : T(0);
            h = ad::dropout(t, h, mask);
        }
    }
    r.logits = layer::dense_forward(t, h, head, ctx, head.flags.binary_inputs);
    return r;
}

template <typename T>
Tensor<T> Model<T>::predict(const Tensor<T>& points) {
    Tape<T> t(false);
    ForwardOptions<T> opt;
    auto r = forward(t, points, opt);
    return t.value(r.logits);
}

namespace {

template <typename T, typename Fn>
void visit_layer(const std::string& prefix, LayerParams<T>& p, Fn&& fn) {
    const ParamRole wrole = has_binary_weights(p.kind) ? ParamRole::weight_binary
                                                       : ParamRole::weight_real;
    auto emit = [&](const char* name, Parameter<T>& param, ParamRole role) {
        if (!param.empty()) fn(prefix + "." + name, param, role);
    };
    emit("weight", p.weight, wrole);
    emit("bias", p.bias, ParamRole::bias);
    emit("alpha", p.alpha, ParamRole::rescale);
    emit("beta", p.beta, ParamRole::rescale);
    emit("gamma", p.gamma, ParamRole::rescale);
    emit("bn_node.scale", p.bn_node.scale, ParamRole::bn_scale);
    emit("bn_node.shift", p.bn_node.shift, ParamRole::bn_shift);
    emit("bn_edge.scale", p.bn_edge.scale, ParamRole::bn_scale);
    emit("bn_edge.shift", p.bn_edge.shift, ParamRole::bn_shift);
    emit("bn_out.scale", p.bn_out.scale, ParamRole::bn_scale);
    emit("bn_out.shift", p.bn_out.shift, ParamRole::bn_shift);
    emit("prelu", p.prelu_slope, ParamRole::prelu);
}

template <typename T, typename Fn>
void visit_buffers(const std::string& prefix, LayerParams<T>& p, Fn&& fn) {
    auto emit = [&](const char* name, BatchNormBlock<T>& b) {
        if (b.empty()) return;
        fn(prefix + "." + name + ".running_mean", b.state.running_mean);
        fn(prefix + "." + name + ".running_var", b.state.running_var);
    };
    emit("bn_node", p.bn_node);
    emit("bn_edge", p.bn_edge);
    emit("bn_out", p.bn_out);
}

}  // namespace

template <typename T>
void Model<T>::for_each_parameter(
    const std::function<void(const std::string&, Parameter<T>&, ParamRole)>& fn) {
    for (std::size_t i = 0; i < convs.size(); ++i) visit_layer("conv" + std::to_string(i), convs[i], fn);
    visit_layer("embedding", embedding, fn);
    for (std::size_t i = 0; i < mlp.size(); ++i) visit_layer("mlp" + std::to_string(i), mlp[i], fn);
    visit_layer("head", head, fn);
}

template <typename T>
void Model<T>::for_each_buffer(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    for (std::size_t i = 0; i < convs.size(); ++i) visit_buffers("conv" + std::to_string(i), convs[i], fn);
    visit_buffers("embedding", embedding, fn);
    for (std::size_t i = 0; i < mlp.size(); ++i) visit_buffers("mlp" + std::to_string(i), mlp[i], fn);
    visit_buffers("head", head, fn);
}

template <typename T>
std::size_t Model<T>::parameter_count() {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, Parameter<T>& p, ParamRole) { n += p.value.size(); });
    return n;
}

template <typename T>
bool Model<T>::stores_binary(ParamRole role) const noexcept {
    return role == ParamRole::weight_binary && spec.weight_quant == Quantizer::sign;
}

template <typename T>
std::size_t Model<T>::binary_weight_count() {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, Parameter<T>& p, ParamRole role) {
        if (stores_binary(role)) n += p.value.size();
    });
    return n;
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
    Model<U> m;
    m.spec = spec;
    for (const auto& c : convs) m.convs.push_back(c.template cast<U>());
    m.embedding = embedding.template cast<U>();
    for (const auto& l : mlp) m.mlp.push_back(l.template cast<U>());
    m.head = head.template cast<U>();
    return m;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;

}  // namespace bgnn
