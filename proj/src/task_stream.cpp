#include "genreplay/task_stream.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "genreplay/errors.hpp"
#include "genreplay/io.hpp"
#include "genreplay/rng.hpp"

namespace genreplay {

using json = nlohmann::json;

Tensor Dataset::image(int i) const {
  int c = images.dim(1), h = images.dim(2), w = images.dim(3);
  Tensor out({c, h, w});
  std::copy(images.data() + static_cast<size_t>(i) * c * h * w,
            images.data() + static_cast<size_t>(i + 1) * c * h * w, out.data());
  return out;
}

std::string Dataset::compute_digest() const {
  Sha256 h;
  h.update(images.storage());
  h.update(labels.data(), labels.size() * sizeof(int));
  for (const auto& name : class_names) h.update(name);
  return h.hex_digest();
}

Tensor Subset::gather_images(const std::vector<int>& rows) const {
  int c = data->images.dim(1), h = data->images.dim(2), w = data->images.dim(3);
  Tensor out({static_cast<int>(rows.size()), c, h, w});
  size_t img = static_cast<size_t>(c) * h * w;
  for (size_t r = 0; r < rows.size(); ++r) {
    int idx = indices[static_cast<size_t>(rows[r])];
    std::copy(data->images.data() + idx * img, data->images.data() + (idx + 1) * img,
              out.data() + r * img);
  }
  return out;
}

std::vector<int> TaskSequence::classes_through(int upto) const {
  std::vector<int> out;
  for (int i = 0; i <= upto && i < num_tasks(); ++i)
    out.insert(out.end(), tasks[static_cast<size_t>(i)].class_set.begin(),
               tasks[static_cast<size_t>(i)].class_set.end());
  return out;
}

std::string TaskSequence::manifest_json() const {
  json tasks_j = json::array();
  for (const auto& t : tasks) {
    tasks_j.push_back({{"task_index", t.task_index},
                       {"classes", t.class_set},
                       {"train_count", t.train_split.size()},
                       {"eval_count", t.eval_split.size()}});
  }
  json j = {{"protocol", protocol_name}, {"seed", seed}, {"tasks", tasks_j}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// LabelMap

void LabelMap::register_task(const std::vector<int>& class_set) {
  int task = num_tasks();
  head_offsets_.push_back(total_classes());
  for (size_t i = 0; i < class_set.size(); ++i) {
    int gid = class_set[i];
    if (global_to_head_.count(gid))
      throw ConfigError("class " + std::to_string(gid) + " registered twice in label map");
    global_to_head_[gid] = {task, static_cast<int>(i)};
    column_to_global_.push_back(gid);
  }
}

std::pair<int, int> LabelMap::map_label(int global_id) const {
  auto it = global_to_head_.find(global_id);
  if (it == global_to_head_.end())
    throw LookupError("class " + std::to_string(global_id) + " is not registered");
  return it->second;
}

int LabelMap::to_column(int global_id) const {
  auto [task, offset] = map_label(global_id);
  return head_offsets_[static_cast<size_t>(task)] + offset;
}

int LabelMap::from_column(int column) const {
  if (column < 0 || column >= total_classes())
    throw LookupError("logit column " + std::to_string(column) + " out of range");
  return column_to_global_[static_cast<size_t>(column)];
}

LabelMap LabelMap::for_sequence(const TaskSequence& seq, int through_task) {
  LabelMap map;
  for (int i = 0; i <= through_task && i < seq.num_tasks(); ++i)
    map.register_task(seq.tasks[static_cast<size_t>(i)].class_set);
  return map;
}

// ---------------------------------------------------------------------------
// Protocols

std::string ProtocolSpec::name() const {
  if (kind == SplitProtocol::EqualPhase) return "equal-phase(" + std::to_string(phases) + ")";
  return "half-then-equal";
}

ProtocolSpec ProtocolSpec::parse(const std::string& text) {
  ProtocolSpec spec;
  if (text == "half-then-equal") {
    spec.kind = SplitProtocol::HalfThenEqual;
    spec.phases = 6;
    return spec;
  }
  int p = 0;
  if (std::sscanf(text.c_str(), "equal-phase(%d)", &p) == 1 && p >= 2) {
    spec.kind = SplitProtocol::EqualPhase;
    spec.phases = p;
    return spec;
  }
  throw ConfigError("unknown protocol '" + text +
                    "'; expected equal-phase(P) with P>=2 or half-then-equal");
}

std::vector<std::vector<int>> split_classes(int num_classes, const ProtocolSpec& protocol,
                                            uint64_t seed, bool shuffle) {
  std::vector<int> order(static_cast<size_t>(num_classes));
  for (int i = 0; i < num_classes; ++i) order[static_cast<size_t>(i)] = i;
  if (shuffle) {
    Rng rng = Rng::from(seed, 0x73706c6974ULL);
    rng.shuffle(order);
  }
  std::vector<int> sizes;
  if (protocol.kind == SplitProtocol::EqualPhase) {
    if (protocol.phases < 2)
      throw ConfigError("equal-phase requires P >= 2");
    if (num_classes % protocol.phases != 0)
      throw ConfigError(protocol.name() + ": " + std::to_string(num_classes) +
                        " classes are not divisible into " + std::to_string(protocol.phases) +
                        " equal parts");
    sizes.assign(static_cast<size_t>(protocol.phases), num_classes / protocol.phases);
  } else {
    if (num_classes % 2 != 0 || (num_classes / 2) % 5 != 0)
      throw ConfigError("half-then-equal: " + std::to_string(num_classes) +
                        " classes cannot form one half plus 5 equal parts");
    sizes.push_back(num_classes / 2);
    sizes.insert(sizes.end(), 5, num_classes / 10);
  }
  std::vector<std::vector<int>> out;
  size_t pos = 0;
  for (int s : sizes) {
    out.emplace_back(order.begin() + static_cast<long>(pos), order.begin() + static_cast<long>(pos + s));
    pos += static_cast<size_t>(s);
  }
  return out;
}

TaskSequence materialize_tasks(std::shared_ptr<const Dataset> train,
                               std::shared_ptr<const Dataset> eval,
                               const std::vector<std::vector<int>>& skeleton,
                               const ProtocolSpec& protocol, uint64_t seed) {
  TaskSequence seq;
  seq.protocol_name = protocol.name();
  seq.seed = seed;
  auto split_for = [&](const std::shared_ptr<const Dataset>& data, const std::vector<int>& classes,
                       int task_index, const char* split_name) {
    std::set<int> wanted(classes.begin(), classes.end());
    std::vector<int> idx;
    for (int i = 0; i < data->size(); ++i)
      if (wanted.count(data->labels[static_cast<size_t>(i)])) idx.push_back(i);
    std::map<int, int> counts;
    for (int i : idx) ++counts[data->labels[static_cast<size_t>(i)]];
    std::vector<int> missing;
    for (int c : classes)
      if (!counts.count(c)) missing.push_back(c);
    if (!missing.empty()) {
      std::string msg = std::string(split_name) + " split has no examples for classes:";
      for (int c : missing) msg += " " + std::to_string(c);
      throw DataError(msg);
    }
    Rng rng = Rng::from(seed, 0x6f72646572ULL + static_cast<uint64_t>(task_index) * 2 +
                                  (std::string(split_name) == "train" ? 0 : 1));
    rng.shuffle(idx);
    return Subset{data, std::move(idx)};
  };
  for (size_t t = 0; t < skeleton.size(); ++t) {
    TaskSpec task;
    task.task_index = static_cast<int>(t);
    task.class_set = skeleton[t];
    task.train_split = split_for(train, task.class_set, task.task_index, "train");
    task.eval_split = split_for(eval, task.class_set, task.task_index, "eval");
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Synthetic datasets

namespace {

// Evenly spaced hues, full saturation.
void class_color(int c, int num_classes, double rgb[3]) {
  double hue = 6.0 * c / std::max(1, num_classes);
  int sector = static_cast<int>(hue) % 6;
  double f = hue - std::floor(hue);
  double p = 0.0, q = 1.0 - f, t = f;
  double r, g, b;
  switch (sector) {
    case 0: r = 1, g = t, b = p; break;
    case 1: r = q, g = 1, b = p; break;
    case 2: r = p, g = 1, b = t; break;
    case 3: r = p, g = q, b = 1; break;
    case 4: r = t, g = p, b = 1; break;
    default: r = 1, g = p, b = q; break;
  }
  rgb[0] = r * 1.6 - 0.6;  // map to [-0.6, 1.0]
  rgb[1] = g * 1.6 - 0.6;
  rgb[2] = b * 1.6 - 0.6;
}

void render_class_sample(Tensor& img, int c, const SyntheticSpec& spec, Rng& rng) {
  int H = spec.height, W = spec.width, C = spec.channels;
  img.fill(-0.85);
  int pair_id = c / 2;
  bool in_pair = c < 2 * spec.confusable_pairs;
  // Confusable twins share the pattern class id; others keep their own.
  int pattern_class = in_pair ? spec.num_classes + pair_id : c;
  double rgb[3];
  class_color(pattern_class % spec.num_classes, spec.num_classes, rgb);
  double angle = 2.0 * M_PI * pattern_class / spec.num_classes;
  double cy = H / 2.0 + (H / 4.0) * std::sin(angle);
  double cx = W / 2.0 + (W / 4.0) * std::cos(angle);
  int jy = rng.uniform_int(3) - 1;
  int jx = rng.uniform_int(3) - 1;
  double radius = H / 4.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double dy = y - (cy + jy), dx = x - (cx + jx);
      if (dy * dy + dx * dx <= radius * radius) {
        for (int ch = 0; ch < C; ++ch) img[(ch * H + y) * W + x] = rgb[ch % 3];
      }
    }
  if (in_pair) {
    // Low-contrast marker distinguishing the twins: a short horizontal bar on
    // the left or right edge of the blob.
    int side = (c % 2 == 0) ? -1 : 1;
    int my = static_cast<int>(cy) + jy;
    int mx = static_cast<int>(cx) + jx + side * static_cast<int>(radius);
    for (int d = 0; d < 2; ++d) {
      int y = std::clamp(my + d, 0, H - 1);
      int x = std::clamp(mx, 0, W - 1);
      for (int ch = 0; ch < C; ++ch) img[(ch * H + y) * W + x] = (ch == c % 2) ? 1.0 : -0.3;
    }
  }
  for (int i = 0; i < img.size(); ++i) {
    img[i] = std::clamp(img[i] + rng.normal(0.0, spec.noise), -1.0, 1.0);
  }
}

std::shared_ptr<Dataset> synth_split(const SyntheticSpec& spec, int per_class, uint64_t tag) {
  auto data = std::make_shared<Dataset>();
  int n = per_class * spec.num_classes;
  data->images = Tensor({n, spec.channels, spec.height, spec.width});
  data->labels.resize(static_cast<size_t>(n));
  for (int c = 0; c < spec.num_classes; ++c) data->class_names.push_back("class" + std::to_string(c));
  Rng rng = Rng::from(spec.seed, tag);
  Tensor img({spec.channels, spec.height, spec.width});
  size_t img_sz = static_cast<size_t>(img.size());
  int row = 0;
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      render_class_sample(img, c, spec, rng);
      std::copy(img.data(), img.data() + img_sz, data->images.data() + row * img_sz);
      data->labels[static_cast<size_t>(row)] = c;
      ++row;
    }
  }
  data->digest = data->compute_digest();
  return data;
}

}  // namespace

DatasetPair make_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.num_classes < 2 || 2 * spec.confusable_pairs > spec.num_classes)
    throw ConfigError("bad synthetic spec: classes=" + std::to_string(spec.num_classes) +
                      " confusable_pairs=" + std::to_string(spec.confusable_pairs));
  DatasetPair pair;
  pair.train = synth_split(spec, spec.per_class_train, 0x747261696eULL);
  pair.eval = synth_split(spec, spec.per_class_eval, 0x6576616cULL);
  return pair;
}

// ---------------------------------------------------------------------------
// Directory datasets

namespace {

std::shared_ptr<Dataset> load_split_dir(const std::filesystem::path& split_root,
                                        const std::vector<std::string>& class_names) {
  auto data = std::make_shared<Dataset>();
  data->class_names = class_names;
  std::vector<Tensor> imgs;
  for (size_t c = 0; c < class_names.size(); ++c) {
    std::filesystem::path cdir = split_root / class_names[c];
    if (!std::filesystem::is_directory(cdir))
      throw DataError("missing class directory: " + cdir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(cdir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      imgs.push_back(read_image_pnm(f));
      data->labels.push_back(static_cast<int>(c));
    }
  }
  if (imgs.empty()) throw DataError("no images under " + split_root.string());
  const auto& s = imgs[0].shape();
  data->images = Tensor({static_cast<int>(imgs.size()), s[0], s[1], s[2]});
  size_t img_sz = static_cast<size_t>(imgs[0].size());
  for (size_t i = 0; i < imgs.size(); ++i) {
    if (imgs[i].shape() != s) throw DataError("inconsistent image shapes under " + split_root.string());
    std::copy(imgs[i].data(), imgs[i].data() + img_sz, data->images.data() + i * img_sz);
  }
  data->digest = data->compute_digest();
  return data;
}

}  // namespace

DatasetPair load_directory_dataset(const std::filesystem::path& root) {
  std::vector<std::string> class_names;
  std::filesystem::path manifest = root / "manifest.json";
  if (std::filesystem::exists(manifest)) {
    json j = json::parse(read_text_file(manifest));
    class_names = j.at("classes").get<std::vector<std::string>>();
  } else {
    for (const auto& e : std::filesystem::directory_iterator(root / "train"))
      if (e.is_directory()) class_names.push_back(e.path().filename().string());
    std::sort(class_names.begin(), class_names.end());
  }
  if (class_names.empty()) throw DataError("no classes found under " + root.string());
  DatasetPair pair;
  pair.train = load_split_dir(root / "train", class_names);
  pair.eval = load_split_dir(root / "eval", class_names);
  return pair;
}

void save_directory_dataset(const std::filesystem::path& root, const DatasetPair& data) {
  json manifest = {{"classes", data.train->class_names}};
  std::filesystem::create_directories(root);
  atomic_write_file(root / "manifest.json", manifest.dump(2));
  auto dump_split = [](const std::filesystem::path& split_root, const Dataset& d) {
    std::vector<int> counter(d.class_names.size(), 0);
    for (int i = 0; i < d.size(); ++i) {
      int c = d.labels[static_cast<size_t>(i)];
      std::filesystem::path dir = split_root / d.class_names[static_cast<size_t>(c)];
      std::filesystem::create_directories(dir);
      char name[32];
      std::snprintf(name, sizeof(name), "%05d.%s", counter[static_cast<size_t>(c)]++,
                    d.images.dim(1) == 1 ? "pgm" : "ppm");
      write_image_pnm(dir / name, d.image(i));
    }
  };
  dump_split(root / "train", *data.train);
  dump_split(root / "eval", *data.eval);
}

// ---------------------------------------------------------------------------
// Descriptors

namespace {

std::map<std::string, std::string> parse_query(const std::string& q) {
  std::map<std::string, std::string> out;
  std::stringstream ss(q);
  std::string kv;
  while (std::getline(ss, kv, '&')) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("bad dataset option '" + kv + "'");
    out[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return out;
}

}  // namespace

DatasetPair open_dataset(const std::string& descriptor) {
  if (descriptor.rfind("dir:", 0) == 0) return load_directory_dataset(descriptor.substr(4));
  if (descriptor.rfind("synth:", 0) == 0) {
    std::string rest = descriptor.substr(6);
    std::string name = rest, query;
    auto qpos = rest.find('?');
    if (qpos != std::string::npos) {
      name = rest.substr(0, qpos);
      query = rest.substr(qpos + 1);
    }
    SyntheticSpec spec;
    if (name == "tenclass") {
      spec.num_classes = 10;
    } else if (name == "fineblobs") {
      spec.num_classes = 8;
      spec.confusable_pairs = 1;
    } else if (name == "blobs") {
      // fully parameterized via the query string
    } else {
      throw ConfigError("unknown synthetic dataset '" + name + "'");
    }
    for (const auto& [k, v] : parse_query(query)) {
      if (k == "classes") spec.num_classes = std::stoi(v);
      else if (k == "train") spec.per_class_train = std::stoi(v);
      else if (k == "eval") spec.per_class_eval = std::stoi(v);
      else if (k == "hw") spec.height = spec.width = std::stoi(v);
      else if (k == "channels") spec.channels = std::stoi(v);
      else if (k == "pairs") spec.confusable_pairs = std::stoi(v);
      else if (k == "noise") spec.noise = std::stod(v);
      else if (k == "seed") spec.seed = std::stoull(v);
      else throw ConfigError("unknown dataset option '" + k + "'");
    }
    return make_synthetic_dataset(spec);
  }
  throw ConfigError("unknown dataset descriptor '" + descriptor + "' (use synth:... or dir:...)");
}

}  // namespace genreplay
