#include "genreplay/model_zoo.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "genreplay/errors.hpp"
#include "genreplay/io.hpp"

namespace genreplay {

using json = nlohmann::json;

namespace {

std::pair<std::string, std::vector<std::string>> split_arch_id(const std::string& arch_id) {
  std::vector<std::string> parts;
  std::stringstream ss(arch_id);
  std::string tok;
  while (std::getline(ss, tok, ':')) parts.push_back(tok);
  if (parts.empty()) throw ConfigError("empty architecture id");
  std::string family = parts.front();
  parts.erase(parts.begin());
  return {family, parts};
}

std::unique_ptr<Sequential> build_desk_trunk(const InputShape& in, int& feature_dim, Rng& rng) {
  auto net = std::make_unique<Sequential>();
  net->emplace<Conv2d>(in.channels, 16, 3, 1, 1, rng);
  net->emplace<BatchNorm2d>(16);
  net->emplace<ReLU>();
  net->emplace<Conv2d>(16, 32, 3, 2, 1, rng);
  net->emplace<BatchNorm2d>(32);
  net->emplace<ReLU>();
  net->emplace<Conv2d>(32, 48, 3, 2, 1, rng);
  net->emplace<BatchNorm2d>(48);
  net->emplace<ReLU>();
  net->emplace<Conv2d>(48, 64, 3, 1, 1, rng);
  net->emplace<BatchNorm2d>(64);
  net->emplace<ReLU>();
  net->emplace<GlobalAvgPool>();
  feature_dim = 64;
  return net;
}

std::unique_ptr<Sequential> build_resnet_trunk(const InputShape& in, const std::vector<int>& blocks,
                                               int& feature_dim, Rng& rng) {
  auto net = std::make_unique<Sequential>();
  net->emplace<Conv2d>(in.channels, 64, 3, 1, 1, rng);
  net->emplace<BatchNorm2d>(64);
  net->emplace<ReLU>();
  int ch = 64;
  const int stage_ch[4] = {64, 128, 256, 512};
  for (int stage = 0; stage < 4; ++stage) {
    int out_ch = stage_ch[stage];
    int stride = stage == 0 ? 1 : 2;
    for (int b = 0; b < blocks[static_cast<size_t>(stage)]; ++b) {
      net->emplace<ResidualBlock>(ch, out_ch, b == 0 ? stride : 1, rng);
      ch = out_ch;
    }
  }
  net->emplace<GlobalAvgPool>();
  feature_dim = 512;
  return net;
}

// Tiny two-conv trunk used by gradient-check fixtures.
std::unique_ptr<Sequential> build_micro_trunk(const InputShape& in, int& feature_dim, Rng& rng) {
  auto net = std::make_unique<Sequential>();
  net->emplace<Conv2d>(in.channels, 6, 3, 1, 1, rng);
  net->emplace<BatchNorm2d>(6);
  net->emplace<ReLU>();
  net->emplace<Conv2d>(6, 8, 3, 2, 1, rng);
  net->emplace<BatchNorm2d>(8);
  net->emplace<ReLU>();
  net->emplace<GlobalAvgPool>();
  feature_dim = 8;
  return net;
}

void copy_tensors(const std::vector<Tensor*>& dst, const std::vector<const Tensor*>& src) {
  if (dst.size() != src.size()) throw DimensionError("tensor list size mismatch in copy");
  for (size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->shape() != src[i]->shape())
      throw DimensionError("tensor shape mismatch in copy: " + dst[i]->shape_str() + " vs " +
                           src[i]->shape_str());
    std::copy(src[i]->data(), src[i]->data() + src[i]->size(), dst[i]->data());
  }
}

std::vector<const Tensor*> as_const(const std::vector<Tensor*>& v) {
  return std::vector<const Tensor*>(v.begin(), v.end());
}

struct CheckpointBlob {
  json meta;
  std::vector<std::vector<double>> tensors;
};

void write_checkpoint(const std::filesystem::path& path, json meta,
                      const std::vector<const Tensor*>& tensors) {
  json tlist = json::array();
  for (const Tensor* t : tensors) tlist.push_back(t->shape());
  meta["tensor_shapes"] = tlist;
  meta["format_version"] = 1;
  std::string header = meta.dump();
  std::ostringstream out;
  out.write("GRCKPT01", 8);
  uint64_t hlen = header.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const Tensor* t : tensors)
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(sizeof(double) * t->size()));
  atomic_write_file(path, out.str());
}

CheckpointBlob read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "GRCKPT01", 8) != 0)
    throw IoError("not a checkpoint file: " + path.string());
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("truncated checkpoint header: " + path.string());
  CheckpointBlob blob;
  blob.meta = json::parse(header);
  if (blob.meta.value("format_version", 0) != 1)
    throw IoError("unsupported checkpoint version in " + path.string());
  for (const auto& shape : blob.meta["tensor_shapes"]) {
    int n = 1;
    for (int d : shape.get<std::vector<int>>()) n *= d;
    std::vector<double> data(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(sizeof(double) * n));
    if (!in) throw IoError("truncated checkpoint data: " + path.string());
    blob.tensors.push_back(std::move(data));
  }
  return blob;
}

std::string digest_tensors(const std::vector<const Tensor*>& tensors,
                           const std::vector<int>& extra_ints) {
  Sha256 h;
  for (int v : extra_ints) {
    int64_t x = v;
    h.update(&x, sizeof(x));
  }
  for (const Tensor* t : tensors) h.update(t->data(), sizeof(double) * t->size());
  return h.hex_digest();
}

}  // namespace

InputShape parse_input_shape(const std::string& spec) {
  InputShape s;
  if (std::sscanf(spec.c_str(), "%dx%dx%d", &s.channels, &s.height, &s.width) != 3)
    throw ConfigError("bad input shape '" + spec + "', expected CxHxW");
  return s;
}

// ---------------------------------------------------------------------------
// Classifier

Classifier::Classifier(std::string arch_id, uint64_t init_seed) : arch_id_(std::move(arch_id)) {
  auto [family, args] = split_arch_id(arch_id_);
  if (args.size() != 1) throw ConfigError("classifier arch '" + arch_id_ + "' needs CxHxW");
  input_shape_ = parse_input_shape(args[0]);
  Rng rng = Rng::from(init_seed, 0x7472756e6bULL);
  if (family == "desk") {
    trunk_ = build_desk_trunk(input_shape_, feature_dim_, rng);
  } else if (family == "micro") {
    trunk_ = build_micro_trunk(input_shape_, feature_dim_, rng);
  } else if (family == "resnet18") {
    trunk_ = build_resnet_trunk(input_shape_, {2, 2, 2, 2}, feature_dim_, rng);
  } else if (family == "resnet34") {
    trunk_ = build_resnet_trunk(input_shape_, {3, 4, 6, 3}, feature_dim_, rng);
  } else {
    throw ConfigError("unknown classifier family '" + family + "'");
  }
}

int Classifier::total_classes() const {
  int n = 0;
  for (int w : head_widths_) n += w;
  return n;
}

Tensor Classifier::forward(const Tensor& images, Mode mode) {
  if (heads_.empty()) throw ConfigError("classifier has no heads; call expand_head first");
  if (images.ndim() != 4 || images.dim(1) != input_shape_.channels ||
      images.dim(2) != input_shape_.height || images.dim(3) != input_shape_.width)
    throw DimensionError("classifier input " + images.shape_str() + " does not match arch " +
                         arch_id_);
  features_ = trunk_->forward(images, mode);
  int n = images.dim(0);
  Tensor logits({n, total_classes()});
  int col = 0;
  for (auto& head : heads_) {
    Tensor part = head->forward(features_, mode);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < head->out_features; ++j) logits.at(i, col + j) = part.at(i, j);
    col += head->out_features;
  }
  return logits;
}

Tensor Classifier::backward(const Tensor& dlogits) {
  int n = dlogits.dim(0);
  Tensor dfeat({n, feature_dim_});
  int col = 0;
  for (auto& head : heads_) {
    Tensor part({n, head->out_features});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < head->out_features; ++j) part.at(i, j) = dlogits.at(i, col + j);
    dfeat += head->backward(part);
    col += head->out_features;
  }
  return trunk_->backward(dfeat);
}

void Classifier::expand_head(int k_new, uint64_t init_seed) {
  if (k_new < 1) throw ConfigError("expand_head requires k_new >= 1");
  Rng rng = Rng::from(init_seed, 0x68656164ULL + heads_.size());
  heads_.push_back(std::make_unique<Linear>(feature_dim_, k_new, rng));
  head_widths_.push_back(k_new);
}

std::vector<BnStats> Classifier::extract_bn_stats() const {
  auto bns = collect_bn_layers(*trunk_);
  if (bns.empty())
    throw ConfigError("architecture '" + arch_id_ + "' has no normalization layers");
  std::vector<BnStats> out;
  out.reserve(bns.size());
  for (BatchNorm2d* bn : bns)
    out.push_back(BnStats{bn->running_mean, bn->running_var, bn->channels});
  return out;
}

std::vector<Tensor*> Classifier::params() {
  auto ps = collect_params(*trunk_);
  for (auto& h : heads_) {
    auto hp = collect_params(*h);
    ps.insert(ps.end(), hp.begin(), hp.end());
  }
  return ps;
}

std::vector<Tensor*> Classifier::grads() {
  auto gs = collect_grads(*trunk_);
  for (auto& h : heads_) {
    auto hg = collect_grads(*h);
    gs.insert(gs.end(), hg.begin(), hg.end());
  }
  return gs;
}

std::vector<Tensor*> Classifier::state() { return collect_state(*trunk_); }

void Classifier::zero_grads() {
  for (Tensor* g : grads()) g->zero();
}

Classifier Classifier::clone() const {
  Classifier copy(arch_id_, 0);
  for (size_t i = 0; i < heads_.size(); ++i)
    copy.expand_head(head_widths_[i], 0);
  auto* self = const_cast<Classifier*>(this);
  copy_tensors(copy.params(), as_const(self->params()));
  copy_tensors(copy.state(), as_const(self->state()));
  return copy;
}

std::string Classifier::param_digest() const {
  auto* self = const_cast<Classifier*>(this);
  std::vector<const Tensor*> all = as_const(self->params());
  auto st = as_const(self->state());
  all.insert(all.end(), st.begin(), st.end());
  return digest_tensors(all, head_widths_);
}

void Classifier::save(const std::filesystem::path& path, const std::string& config_hash) const {
  auto* self = const_cast<Classifier*>(this);
  std::vector<const Tensor*> all = as_const(self->params());
  auto st = as_const(self->state());
  all.insert(all.end(), st.begin(), st.end());
  json meta = {{"kind", "classifier"},
               {"arch_id", arch_id_},
               {"head_widths", head_widths_},
               {"config_hash", config_hash},
               {"param_digest", param_digest()}};
  write_checkpoint(path, std::move(meta), all);
}

Classifier Classifier::load(const std::filesystem::path& path) {
  CheckpointBlob blob = read_checkpoint(path);
  if (blob.meta.value("kind", "") != "classifier")
    throw IoError("checkpoint is not a classifier: " + path.string());
  Classifier model(blob.meta["arch_id"].get<std::string>(), 0);
  for (int w : blob.meta["head_widths"].get<std::vector<int>>()) model.expand_head(w, 0);
  std::vector<Tensor*> all = model.params();
  auto st = model.state();
  all.insert(all.end(), st.begin(), st.end());
  if (all.size() != blob.tensors.size())
    throw IoError("checkpoint tensor count mismatch: " + path.string());
  for (size_t i = 0; i < all.size(); ++i) {
    if (static_cast<size_t>(all[i]->size()) != blob.tensors[i].size())
      throw IoError("checkpoint tensor size mismatch: " + path.string());
    std::copy(blob.tensors[i].begin(), blob.tensors[i].end(), all[i]->data());
  }
  return model;
}

std::string Classifier::peek_meta_json(const std::filesystem::path& path) {
  return read_checkpoint(path).meta.dump(2);
}

// ---------------------------------------------------------------------------
// Generator

namespace {

std::unique_ptr<Sequential> build_desk_generator(int noise_dim, const InputShape& out, Rng& rng) {
  if (out.height % 4 != 0 || out.width % 4 != 0)
    throw ConfigError("deskgen output must be divisible by 4");
  int h0 = out.height / 4, w0 = out.width / 4;
  auto net = std::make_unique<Sequential>();
  net->emplace<Linear>(noise_dim, 48 * h0 * w0, rng);
  net->emplace<Reshape>(std::vector<int>{48, h0, w0});
  net->emplace<BatchNorm2d>(48);
  net->emplace<ReLU>();
  net->emplace<ConvTranspose2d>(48, 24, 4, 2, 1, 0, rng);
  net->emplace<BatchNorm2d>(24);
  net->emplace<ReLU>();
  net->emplace<ConvTranspose2d>(24, 12, 4, 2, 1, 0, rng);
  net->emplace<BatchNorm2d>(12);
  net->emplace<ReLU>();
  net->emplace<Conv2d>(12, out.channels, 3, 1, 1, rng);
  net->emplace<Tanh>();
  return net;
}

std::unique_ptr<Sequential> build_dcgan_generator(int noise_dim, const InputShape& out, Rng& rng) {
  int doublings = 0;
  int h = out.height;
  while (h > 4) {
    if (h % 2 != 0) throw ConfigError("dcgan output side must be 4*2^k");
    h /= 2;
    ++doublings;
  }
  if (h != 4 || out.width != out.height)
    throw ConfigError("dcgan generator expects square 4*2^k output");
  int ch = 64 << doublings;  // e.g. 32x32 -> 256 base channels
  auto net = std::make_unique<Sequential>();
  net->emplace<Linear>(noise_dim, ch * 4 * 4, rng);
  net->emplace<Reshape>(std::vector<int>{ch, 4, 4});
  net->emplace<BatchNorm2d>(ch);
  net->emplace<ReLU>();
  for (int i = 0; i < doublings - 1; ++i) {
    net->emplace<ConvTranspose2d>(ch, ch / 2, 4, 2, 1, 0, rng);
    net->emplace<BatchNorm2d>(ch / 2);
    net->emplace<ReLU>();
    ch /= 2;
  }
  net->emplace<ConvTranspose2d>(ch, out.channels, 4, 2, 1, 0, rng);
  net->emplace<Tanh>();
  return net;
}

}  // namespace

Generator::Generator(std::string arch_id, uint64_t init_seed) : arch_id_(std::move(arch_id)) {
  auto [family, args] = split_arch_id(arch_id_);
  if (args.size() != 2) throw ConfigError("generator arch '" + arch_id_ + "' needs Z:CxHxW");
  config_.noise_dim = std::stoi(args[0]);
  config_.out_shape = parse_input_shape(args[1]);
  Rng rng = Rng::from(init_seed, 0x67656eULL);
  if (family == "deskgen") {
    net_ = build_desk_generator(config_.noise_dim, config_.out_shape, rng);
  } else if (family == "dcgan") {
    net_ = build_dcgan_generator(config_.noise_dim, config_.out_shape, rng);
  } else {
    throw ConfigError("unknown generator family '" + family + "'");
  }
}

Tensor Generator::check_noise(const Tensor& noise) const {
  if (noise.ndim() != 2 || noise.dim(1) != config_.noise_dim)
    throw DimensionError("generator noise " + noise.shape_str() + " does not match noise_dim=" +
                         std::to_string(config_.noise_dim));
  return noise;
}

Tensor Generator::generate(const Tensor& noise) {
  check_noise(noise);
  return net_->forward(noise, Mode::Eval);
}

Tensor Generator::forward_train(const Tensor& noise) {
  check_noise(noise);
  return net_->forward(noise, Mode::Train);
}

Tensor Generator::backward(const Tensor& dimages) { return net_->backward(dimages); }

Generator Generator::clone() const {
  Generator copy(arch_id_, 0);
  copy.config_.covered_classes = config_.covered_classes;
  auto* self = const_cast<Generator*>(this);
  copy_tensors(copy.params(), as_const(self->params()));
  copy_tensors(copy.state(), as_const(self->state()));
  return copy;
}

std::string Generator::param_digest() const {
  auto* self = const_cast<Generator*>(this);
  std::vector<const Tensor*> all = as_const(self->params());
  auto st = as_const(self->state());
  all.insert(all.end(), st.begin(), st.end());
  return digest_tensors(all, {config_.covered_classes});
}

void Generator::save(const std::filesystem::path& path, const std::string& config_hash) const {
  auto* self = const_cast<Generator*>(this);
  std::vector<const Tensor*> all = as_const(self->params());
  auto st = as_const(self->state());
  all.insert(all.end(), st.begin(), st.end());
  json meta = {{"kind", "generator"},
               {"arch_id", arch_id_},
               {"covered_classes", config_.covered_classes},
               {"config_hash", config_hash},
               {"param_digest", param_digest()}};
  write_checkpoint(path, std::move(meta), all);
}

Generator Generator::load(const std::filesystem::path& path) {
  CheckpointBlob blob = read_checkpoint(path);
  if (blob.meta.value("kind", "") != "generator")
    throw IoError("checkpoint is not a generator: " + path.string());
  Generator model(blob.meta["arch_id"].get<std::string>(), 0);
  model.config_.covered_classes = blob.meta.value("covered_classes", 0);
  std::vector<Tensor*> all = model.params();
  auto st = model.state();
  all.insert(all.end(), st.begin(), st.end());
  if (all.size() != blob.tensors.size())
    throw IoError("checkpoint tensor count mismatch: " + path.string());
  for (size_t i = 0; i < all.size(); ++i) {
    if (static_cast<size_t>(all[i]->size()) != blob.tensors[i].size())
      throw IoError("checkpoint tensor size mismatch: " + path.string());
    std::copy(blob.tensors[i].begin(), blob.tensors[i].end(), all[i]->data());
  }
  return model;
}

std::string matching_generator_arch(const std::string& classifier_arch_id, int noise_dim) {
  auto [family, args] = split_arch_id(classifier_arch_id);
  if (args.empty()) throw ConfigError("bad classifier arch '" + classifier_arch_id + "'");
  std::string gen_family = (family == "desk" || family == "micro") ? "deskgen" : "dcgan";
  return gen_family + ":" + std::to_string(noise_dim) + ":" + args[0];
}

}  // namespace genreplay
