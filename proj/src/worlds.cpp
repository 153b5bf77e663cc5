#include "vlab/worlds.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "vlab/rng.hpp"

namespace vlab {

namespace {

constexpr int kRetryBudget = 1000;

std::string fmt_prob(double p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", p);
  return buf;
}

std::string join_ints(const std::vector<int>& v, char sep) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<int> parse_ints(std::string_view s, char sep) {
  std::vector<int> out;
  if (s.empty()) return out;
  for (const auto& tok : split(s, sep)) {
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw DataError("bad integer '" + tok + "' in dataset record");
    }
  }
  return out;
}

}  // namespace

WorldSpec WorldSpec::defaults(uint64_t seed, double confound_prob) {
  WorldSpec w;
  w.seed = seed;
  const int cup = vocab::lookup("cup") - vocab::kObjectBase;
  const int plate = vocab::lookup("plate") - vocab::kObjectBase;
  const int dog = vocab::lookup("dog") - vocab::kObjectBase;
  const int ball = vocab::lookup("ball") - vocab::kObjectBase;
  w.rules = {{cup, plate, confound_prob}, {dog, ball, confound_prob}};
  return w;
}

void WorldSpec::validate() const {
  if (n_types < 2 || n_types > vocab::kObjectCount) {
    throw ConfigError("world type count " + std::to_string(n_types) + " out of range [2, " +
                      std::to_string(vocab::kObjectCount) + "]");
  }
  if (n_colors < 2 || n_colors > vocab::kColorCount) {
    throw ConfigError("world color count out of range");
  }
  if (d_obj < 1 || d_v < 1 || n_slots < 1) {
    throw ConfigError("world dimensions must be positive");
  }
  if (min_objects < 1 || max_objects < min_objects) {
    throw ConfigError("bad object count range [" + std::to_string(min_objects) + ", " +
                      std::to_string(max_objects) + "]");
  }
  if (max_objects + int(rules.size()) > n_slots) {
    throw ConfigError("object count can exceed slot count");
  }
  for (const auto& r : rules) {
    if (r.prob < 0.0 || r.prob > 1.0) {
      throw ConfigError("co-occurrence probability " + fmt_prob(r.prob) + " outside [0, 1]");
    }
    if (r.anchor == r.companion) {
      throw ConfigError("co-occurrence rule with anchor == companion");
    }
    if (r.anchor < 0 || r.anchor >= n_types || r.companion < 0 || r.companion >= n_types) {
      throw ConfigError("co-occurrence rule references an unknown type");
    }
  }
}

bool WorldSpec::confounded() const {
  for (const auto& r : rules) {
    if (r.prob > 0.0) return true;
  }
  return false;
}

std::string WorldSpec::canonical() const {
  std::ostringstream ss;
  ss << "world v1\n"
     << "M=" << n_types << "\n"
     << "d_obj=" << d_obj << "\n"
     << "d_v=" << d_v << "\n"
     << "slots=" << n_slots << "\n"
     << "colors=" << n_colors << "\n"
     << "min_obj=" << min_objects << "\n"
     << "max_obj=" << max_objects << "\n"
     << "seed=" << seed << "\n";
  for (const auto& r : rules) {
    ss << "rule " << r.anchor << ">" << r.companion << "@" << fmt_prob(r.prob) << "\n";
  }
  return ss.str();
}

uint64_t WorldSpec::hash() const { return fnv1a64(canonical()); }

bool Scene::has_type(int type) const { return find_type(type) != nullptr; }

const PlacedObject* Scene::find_type(int type) const {
  for (const auto& o : objects) {
    if (o.type == type) return &o;
  }
  return nullptr;
}

std::vector<int> Scene::present_types() const {
  std::vector<int> out;
  out.reserve(objects.size());
  for (const auto& o : objects) out.push_back(o.type);
  std::sort(out.begin(), out.end());
  return out;
}

const char* probe_kind_name(ProbeKind k) {
  switch (k) {
    case ProbeKind::kPositive: return "positive";
    case ProbeKind::kAdversarialNegative: return "adversarial_negative";
    case ProbeKind::kRandomNegative: return "random_negative";
  }
  return "?";
}

const char* probe_flavor_name(ProbeFlavor f) {
  switch (f) {
    case ProbeFlavor::kPope: return "pope";
    case ProbeFlavor::kMmvpPairs: return "mmvp_pairs";
    case ProbeFlavor::kMerlinEdit: return "merlin_edit";
  }
  return "?";
}

ProbeFlavor parse_probe_flavor(const std::string& s) {
  if (s == "pope") return ProbeFlavor::kPope;
  if (s == "mmvp_pairs") return ProbeFlavor::kMmvpPairs;
  if (s == "merlin_edit") return ProbeFlavor::kMerlinEdit;
  throw ConfigError("unknown probe flavor '" + s +
                    "' (expected pope|mmvp_pairs|merlin_edit)");
}

std::vector<int> caption_preamble() {
  return {vocab::kBos, vocab::kDescribe, vocab::kColon};
}

std::vector<int> probe_preamble() { return {vocab::kBos, vocab::kLook, vocab::kColon}; }

std::vector<int> question_tokens(int object_type) {
  return {vocab::kIs, vocab::object_token(object_type), vocab::kPresent, vocab::kQmark};
}

std::vector<int> caption_body(const Scene& scene) {
  if (scene.objects.empty()) {
    return {vocab::kAn, vocab::kEmpty, vocab::kScene};
  }
  std::vector<int> out;
  bool first = true;
  for (const auto& o : scene.objects) {  // canonical slot order
    if (!first) out.push_back(vocab::kAnd);
    if (first) out.push_back(vocab::kA);
    first = false;
    out.push_back(vocab::color_token(o.color));
    out.push_back(vocab::object_token(o.type));
  }
  return out;
}

World::World(WorldSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  hash_ = spec_.hash();
  {
    Rng rng(spec_.seed, Rng::stream("features"));
    type_features_.resize(size_t(spec_.n_types) * spec_.d_obj);
    for (auto& v : type_features_) v = rng.gaussian();
    for (int a = 0; a < spec_.n_types; ++a) {
      for (int b = a + 1; b < spec_.n_types; ++b) {
        if (std::equal(type_features_.begin() + size_t(a) * spec_.d_obj,
                       type_features_.begin() + size_t(a + 1) * spec_.d_obj,
                       type_features_.begin() + size_t(b) * spec_.d_obj)) {
          throw GenError("duplicate type feature vectors");
        }
      }
    }
  }
  const int d_in = spec_.d_obj + spec_.n_colors + spec_.n_slots;
  {
    Rng rng(spec_.seed, Rng::stream("encoder"));
    encoder_.resize(size_t(d_in) * spec_.d_v);
    const double s = 1.0 / std::sqrt(double(d_in));
    for (auto& v : encoder_) v = rng.gaussian() * s;
  }
  {
    Rng rng(spec_.seed, Rng::stream("null_token"));
    null_token_.resize(spec_.d_v);
    for (auto& v : null_token_) v = rng.gaussian() * 0.7;
  }
}

Scene World::sample_scene(const std::string& stream, uint64_t index) const {
  Rng rng(spec_.seed, Rng::stream("scene/" + stream + "/" + std::to_string(index)));

  const int n_base =
      spec_.min_objects + rng.below_int(spec_.max_objects - spec_.min_objects + 1);
  std::vector<int> perm(spec_.n_types);
  for (int i = 0; i < spec_.n_types; ++i) perm[i] = i;
  shuffle_indices(perm, rng);
  std::set<int> types(perm.begin(), perm.begin() + n_base);

  // Whenever the anchor is present, companion membership is re-rolled as
  // Bernoulli(prob); this pins P(companion | anchor) exactly.
  for (const auto& r : spec_.rules) {
    if (types.count(r.anchor) > 0) {
      if (rng.uniform() < r.prob) {
        types.insert(r.companion);
      } else {
        types.erase(r.companion);
      }
    }
  }

  std::vector<int> slot_perm(spec_.n_slots);
  for (int i = 0; i < spec_.n_slots; ++i) slot_perm[i] = i;
  shuffle_indices(slot_perm, rng);

  Scene scene;
  int i = 0;
  for (int type : types) {  // std::set iterates ascending: deterministic
    PlacedObject o;
    o.type = type;
    o.slot = slot_perm[size_t(i++)];
    o.color = rng.below_int(spec_.n_colors);
    scene.objects.push_back(o);
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const PlacedObject& a, const PlacedObject& b) { return a.slot < b.slot; });
  return scene;
}

TensorF World::encode_scene(const Scene& scene) const {
  const int d_in = spec_.d_obj + spec_.n_colors + spec_.n_slots;
  TensorF out(spec_.n_slots, spec_.d_v);
  std::vector<const PlacedObject*> by_slot(size_t(spec_.n_slots), nullptr);
  for (const auto& o : scene.objects) {
    if (o.slot < 0 || o.slot >= spec_.n_slots || o.type < 0 || o.type >= spec_.n_types ||
        o.color < 0 || o.color >= spec_.n_colors) {
      throw DataError("scene object out of range: slot " + std::to_string(o.slot) +
                      " type " + std::to_string(o.type) + " color " +
                      std::to_string(o.color));
    }
    if (by_slot[size_t(o.slot)] != nullptr) {
      throw DataError("two objects in slot " + std::to_string(o.slot));
    }
    by_slot[size_t(o.slot)] = &o;
  }
  for (int s = 0; s < spec_.n_slots; ++s) {
    float* tok = out.values_mut().data() + size_t(s) * spec_.d_v;
    const PlacedObject* o = by_slot[size_t(s)];
    if (o == nullptr) {
      for (int j = 0; j < spec_.d_v; ++j) tok[j] = float(null_token_[size_t(j)]);
      continue;
    }
    for (int j = 0; j < spec_.d_v; ++j) {
      double acc = 0.0;
      const double* feat = type_features_.data() + size_t(o->type) * spec_.d_obj;
      for (int i = 0; i < spec_.d_obj; ++i) {
        acc += feat[i] * encoder_[size_t(i) * spec_.d_v + j];
      }
      acc += encoder_[size_t(spec_.d_obj + o->color) * spec_.d_v + j];
      acc += encoder_[size_t(spec_.d_obj + spec_.n_colors + s) * spec_.d_v + j];
      tok[j] = float(acc);
    }
  }
  (void)d_in;
  return out;
}

std::vector<int> World::adversarial_candidates(const Scene& scene) const {
  std::set<int> out;
  for (const auto& o : scene.objects) {
    // Companions of this anchor ranked by rule probability.
    std::vector<const CoOccurrenceRule*> rs;
    for (const auto& r : spec_.rules) {
      if (r.anchor == o.type && r.prob > 0.0) rs.push_back(&r);
    }
    std::sort(rs.begin(), rs.end(), [](const CoOccurrenceRule* a, const CoOccurrenceRule* b) {
      if (a->prob != b->prob) return a->prob > b->prob;
      return a->companion < b->companion;
    });
    for (size_t i = 0; i < rs.size() && i < size_t(kTopCompanions); ++i) {
      out.insert(rs[i]->companion);
    }
  }
  std::vector<int> result;
  for (int t : out) {
    if (!scene.has_type(t)) result.push_back(t);
  }
  return result;
}

std::vector<CaptionSample> gen_pretrain_corpus(const World& world, int n,
                                               const std::string& stream) {
  if (n < 1) {
    throw ConfigError("corpus size must be >= 1, got " + std::to_string(n));
  }
  std::vector<CaptionSample> out;
  out.reserve(size_t(n));
  for (int i = 0; i < n; ++i) {
    CaptionSample s;
    s.scene = world.sample_scene(stream, uint64_t(i));
    s.caption = caption_body(s.scene);
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

ProbeKind negative_kind(const World& world, const Scene& scene, int type) {
  auto cands = world.adversarial_candidates(scene);
  return std::binary_search(cands.begin(), cands.end(), type)
             ? ProbeKind::kAdversarialNegative
             : ProbeKind::kRandomNegative;
}

std::vector<int> absent_types(const WorldSpec& spec, const Scene& scene,
                              const std::vector<int>& exclude) {
  std::vector<int> out;
  for (int t = 0; t < spec.n_types; ++t) {
    if (scene.has_type(t)) continue;
    if (std::binary_search(exclude.begin(), exclude.end(), t)) continue;
    out.push_back(t);
  }
  return out;
}

std::vector<ProbeRecord> gen_pope(const World& world, int n, const std::string& stream) {
  if (!world.spec().confounded()) {
    throw GenError(
        "world has no confounded pair (every co-occurrence probability is zero); "
        "pope-style adversarial negatives are unsatisfiable");
  }
  std::vector<ProbeRecord> out;
  uint64_t scene_counter = 0;
  for (int i = 0; i < n; ++i) {
    Rng rng(world.spec().seed, Rng::stream("pick/" + stream + "/" + std::to_string(i)));
    const bool want_yes = (i % 2 == 0);
    const bool want_adv = (i % 4 == 1);
    bool done = false;
    for (int attempt = 0; attempt < kRetryBudget && !done; ++attempt) {
      Scene scene = world.sample_scene(stream, scene_counter++);
      ProbeRecord rec;
      rec.scene = scene;
      if (want_yes) {
        const auto& o = scene.objects[size_t(rng.below_int(int(scene.objects.size())))];
        rec.question = question_tokens(o.type);
        rec.answer_yes = true;
        rec.kind = ProbeKind::kPositive;
      } else if (want_adv) {
        auto cands = world.adversarial_candidates(scene);
        if (cands.empty()) continue;
        rec.question = question_tokens(cands[size_t(rng.below_int(int(cands.size())))]);
        rec.answer_yes = false;
        rec.kind = ProbeKind::kAdversarialNegative;
      } else {
        // Random negatives avoid the adversarial candidate pool so the two
        // negative kinds stay disjoint.
        auto cands = world.adversarial_candidates(scene);
        auto pool = absent_types(world.spec(), scene, cands);
        if (pool.empty()) continue;
        rec.question = question_tokens(pool[size_t(rng.below_int(int(pool.size())))]);
        rec.answer_yes = false;
        rec.kind = ProbeKind::kRandomNegative;
      }
      out.push_back(std::move(rec));
      done = true;
    }
    if (!done) {
      throw GenError("pope probe " + std::to_string(i) + " unsatisfiable after " +
                     std::to_string(kRetryBudget) + " scene retries");
    }
  }
  return out;
}

std::vector<ProbeRecord> gen_mmvp(const World& world, int n, const std::string& stream) {
  if (n % 2 != 0) {
    throw GenError("mmvp_pairs needs an even record count, got " + std::to_string(n));
  }
  std::vector<ProbeRecord> out;
  uint64_t scene_counter = 0;
  for (int p = 0; p < n / 2; ++p) {
    Rng rng(world.spec().seed, Rng::stream("mmvp/" + stream + "/" + std::to_string(p)));
    bool done = false;
    for (int attempt = 0; attempt < kRetryBudget && !done; ++attempt) {
      Scene a = world.sample_scene(stream, scene_counter++);
      if (a.objects.empty()) continue;
      // Recolor one object: the encoder outputs differ in exactly that
      // slot's token.
      const size_t oi = size_t(rng.below_int(int(a.objects.size())));
      Scene b = a;
      auto& obj = b.objects[oi];
      obj.color = (obj.color + 1 + rng.below_int(world.spec().n_colors - 1)) %
                  world.spec().n_colors;

      auto cands = world.adversarial_candidates(b);
      int neg_type;
      if (!cands.empty()) {
        neg_type = cands[size_t(rng.below_int(int(cands.size())))];
      } else {
        auto pool = absent_types(world.spec(), b, {});
        if (pool.empty()) continue;
        neg_type = pool[size_t(rng.below_int(int(pool.size())))];
      }

      ProbeRecord r1;
      r1.scene = a;
      r1.question = question_tokens(a.objects[oi].type);
      r1.answer_yes = true;
      r1.kind = ProbeKind::kPositive;
      r1.pair_id = p;
      ProbeRecord r2;
      r2.scene = b;
      r2.question = question_tokens(neg_type);
      r2.answer_yes = false;
      r2.kind = negative_kind(world, b, neg_type);
      r2.pair_id = p;
      out.push_back(std::move(r1));
      out.push_back(std::move(r2));
      done = true;
    }
    if (!done) {
      throw GenError("mmvp pair " + std::to_string(p) + " unsatisfiable after " +
                     std::to_string(kRetryBudget) + " scene retries");
    }
  }
  return out;
}

std::vector<ProbeRecord> gen_merlin(const World& world, int n, const std::string& stream) {
  if (n % 4 != 0) {
    throw GenError("merlin_edit needs a record count divisible by 4, got " +
                   std::to_string(n));
  }
  std::vector<ProbeRecord> out;
  uint64_t scene_counter = 0;
  for (int g = 0; g < n / 4; ++g) {
    Rng rng(world.spec().seed, Rng::stream("merlin/" + stream + "/" + std::to_string(g)));
    bool done = false;
    for (int attempt = 0; attempt < kRetryBudget && !done; ++attempt) {
      Scene orig = world.sample_scene(stream, scene_counter++);
      if (orig.objects.size() < 2) continue;  // the edit must leave one object
      const size_t ri = size_t(rng.below_int(int(orig.objects.size())));
      const int removed_type = orig.objects[ri].type;
      Scene edited = orig;
      edited.objects.erase(edited.objects.begin() + long(ri));

      const int kept_type =
          edited.objects[size_t(rng.below_int(int(edited.objects.size())))].type;
      auto pool = absent_types(world.spec(), orig, {});
      if (pool.empty()) continue;
      const int absent_type = pool[size_t(rng.below_int(int(pool.size())))];

      auto push = [&](const Scene& s, int type, bool yes, EditTag tag) {
        ProbeRecord r;
        r.scene = s;
        r.question = question_tokens(type);
        r.answer_yes = yes;
        r.kind = yes ? ProbeKind::kPositive : negative_kind(world, s, type);
        r.pair_id = g;
        r.edit = tag;
        out.push_back(std::move(r));
      };
      push(orig, removed_type, true, EditTag::kOriginal);
      push(edited, removed_type, false, EditTag::kEdited);
      push(orig, absent_type, false, EditTag::kOriginal);
      push(edited, kept_type, true, EditTag::kEdited);
      done = true;
    }
    if (!done) {
      throw GenError("merlin group " + std::to_string(g) + " unsatisfiable after " +
                     std::to_string(kRetryBudget) + " scene retries");
    }
  }
  return out;
}

}  // namespace

std::vector<ProbeRecord> gen_probe_set(const World& world, int n, ProbeFlavor flavor,
                                       const std::string& stream) {
  if (n < 1) {
    throw ConfigError("probe count must be >= 1, got " + std::to_string(n));
  }
  switch (flavor) {
    case ProbeFlavor::kPope: return gen_pope(world, n, stream);
    case ProbeFlavor::kMmvpPairs: return gen_mmvp(world, n, stream);
    case ProbeFlavor::kMerlinEdit: return gen_merlin(world, n, stream);
  }
  throw ConfigError("bad probe flavor");
}

std::vector<ConfoundStat> measure_confounds(const WorldSpec& spec,
                                            const std::vector<Scene>& scenes) {
  std::vector<ConfoundStat> out;
  for (const auto& r : spec.rules) {
    ConfoundStat st;
    st.rule = r;
    for (const auto& s : scenes) {
      if (!s.has_type(r.anchor)) continue;
      st.anchor_scenes++;
      if (s.has_type(r.companion)) st.companion_scenes++;
    }
    out.push_back(st);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------
namespace {

std::string scene_field(const Scene& s) {
  std::string out;
  for (size_t i = 0; i < s.objects.size(); ++i) {
    if (i) out += ',';
    const auto& o = s.objects[i];
    out += std::to_string(o.slot) + ":" + std::to_string(o.type) + ":" +
           std::to_string(o.color);
  }
  return out;
}

Scene parse_scene_field(std::string_view field) {
  Scene s;
  if (field.empty()) return s;
  for (const auto& triple : split(field, ',')) {
    auto parts = split(triple, ':');
    if (parts.size() != 3) {
      throw DataError("bad slot:type:color triple '" + triple + "'");
    }
    PlacedObject o;
    o.slot = std::stoi(parts[0]);
    o.type = std::stoi(parts[1]);
    o.color = std::stoi(parts[2]);
    s.objects.push_back(o);
  }
  return s;
}

std::string world_field(const WorldSpec& w) {
  std::ostringstream ss;
  ss << "M:" << w.n_types << ";dobj:" << w.d_obj << ";dv:" << w.d_v << ";slots:" << w.n_slots
     << ";colors:" << w.n_colors << ";minobj:" << w.min_objects << ";maxobj:" << w.max_objects
     << ";seed:" << w.seed;
  return ss.str();
}

WorldSpec parse_world_field(const std::string& field, const std::string& rules_field) {
  WorldSpec w;
  w.rules.clear();
  for (const auto& kv : split(field, ';')) {
    auto parts = split(kv, ':');
    if (parts.size() != 2) throw DataError("bad world field '" + kv + "'");
    const std::string& k = parts[0];
    const std::string& v = parts[1];
    if (k == "M") w.n_types = std::stoi(v);
    else if (k == "dobj") w.d_obj = std::stoi(v);
    else if (k == "dv") w.d_v = std::stoi(v);
    else if (k == "slots") w.n_slots = std::stoi(v);
    else if (k == "colors") w.n_colors = std::stoi(v);
    else if (k == "minobj") w.min_objects = std::stoi(v);
    else if (k == "maxobj") w.max_objects = std::stoi(v);
    else if (k == "seed") w.seed = std::stoull(v);
    else throw DataError("unknown world field '" + k + "'");
  }
  if (!rules_field.empty()) {
    for (const auto& rs : split(rules_field, ';')) {
      const auto gt = rs.find('>');
      const auto at = rs.find('@');
      if (gt == std::string::npos || at == std::string::npos || at < gt) {
        throw DataError("bad rule '" + rs + "'");
      }
      CoOccurrenceRule r;
      r.anchor = std::stoi(rs.substr(0, gt));
      r.companion = std::stoi(rs.substr(gt + 1, at - gt - 1));
      r.prob = std::stod(rs.substr(at + 1));
      w.rules.push_back(r);
    }
  }
  return w;
}

std::string rules_field(const WorldSpec& w) {
  std::string out;
  for (size_t i = 0; i < w.rules.size(); ++i) {
    if (i) out += ';';
    const auto& r = w.rules[i];
    out += std::to_string(r.anchor) + ">" + std::to_string(r.companion) + "@" +
           fmt_prob(r.prob);
  }
  return out;
}

std::string confound_field(const std::vector<ConfoundStat>& stats) {
  std::string out;
  for (size_t i = 0; i < stats.size(); ++i) {
    if (i) out += ';';
    const auto& st = stats[i];
    out += std::to_string(st.rule.anchor) + ">" + std::to_string(st.rule.companion) + "=" +
           std::to_string(st.companion_scenes) + "/" + std::to_string(st.anchor_scenes);
  }
  return out;
}

std::vector<ConfoundStat> parse_confound_field(const WorldSpec& w, const std::string& field) {
  std::vector<ConfoundStat> out;
  if (field.empty()) return out;
  for (const auto& cs : split(field, ';')) {
    const auto gt = cs.find('>');
    const auto eq = cs.find('=');
    const auto sl = cs.find('/');
    if (gt == std::string::npos || eq == std::string::npos || sl == std::string::npos) {
      throw DataError("bad confound stat '" + cs + "'");
    }
    ConfoundStat st;
    st.rule.anchor = std::stoi(cs.substr(0, gt));
    st.rule.companion = std::stoi(cs.substr(gt + 1, eq - gt - 1));
    st.companion_scenes = std::stoi(cs.substr(eq + 1, sl - eq - 1));
    st.anchor_scenes = std::stoi(cs.substr(sl + 1));
    for (const auto& r : w.rules) {
      if (r.anchor == st.rule.anchor && r.companion == st.rule.companion) st.rule = r;
    }
    out.push_back(st);
  }
  return out;
}

std::string header_line(const WorldSpec& w, const std::string& kind,
                        std::optional<ProbeFlavor> flavor, size_t n,
                        const std::string& stream, const std::vector<ConfoundStat>& stats) {
  std::ostringstream ss;
  ss << "#vlab v=1|kind=" << kind << "|flavor="
     << (flavor ? probe_flavor_name(*flavor) : "-") << "|n=" << n << "|hash="
     << hex_u64(w.hash()) << "|stream=" << stream << "|world=" << world_field(w)
     << "|rules=" << rules_field(w) << "|confound=" << confound_field(stats);
  return ss.str();
}

std::map<std::string, std::string> parse_header(const std::string& line) {
  if (line.rfind("#vlab ", 0) != 0) {
    throw DataError("missing '#vlab' dataset header");
  }
  std::map<std::string, std::string> kv;
  for (const auto& field : split(line.substr(6), '|')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw DataError("bad header field '" + field + "'");
    kv[field.substr(0, eq)] = field.substr(eq + 1);
  }
  return kv;
}

std::map<std::string, std::string> parse_record(const std::string& line) {
  std::map<std::string, std::string> kv;
  for (const auto& field : split(line, '|')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw DataError("bad record field '" + field + "'");
    kv[field.substr(0, eq)] = field.substr(eq + 1);
  }
  return kv;
}

}  // namespace

void save_corpus(const std::filesystem::path& path, const World& world,
                 const std::vector<CaptionSample>& captions, const std::string& stream) {
  std::vector<Scene> scenes;
  scenes.reserve(captions.size());
  for (const auto& c : captions) scenes.push_back(c.scene);
  const auto stats = measure_confounds(world.spec(), scenes);
  std::ostringstream out;
  out << header_line(world.spec(), "corpus", std::nullopt, captions.size(), stream, stats)
      << "\n";
  for (const auto& c : captions) {
    out << "slots=" << scene_field(c.scene) << "|caption=" << join_ints(c.caption, ',')
        << "\n";
  }
  write_file_atomic(path, out.str());
}

void save_probes(const std::filesystem::path& path, const World& world, ProbeFlavor flavor,
                 const std::vector<ProbeRecord>& probes, const std::string& stream) {
  std::vector<Scene> scenes;
  scenes.reserve(probes.size());
  for (const auto& p : probes) scenes.push_back(p.scene);
  const auto stats = measure_confounds(world.spec(), scenes);
  std::ostringstream out;
  out << header_line(world.spec(), "probes", flavor, probes.size(), stream, stats) << "\n";
  for (const auto& p : probes) {
    out << "slots=" << scene_field(p.scene) << "|q=" << join_ints(p.question, ',')
        << "|a=" << (p.answer_yes ? "yes" : "no") << "|kind=" << probe_kind_name(p.kind)
        << "|pair=" << p.pair_id << "|edit=";
    switch (p.edit) {
      case EditTag::kNone: out << "-"; break;
      case EditTag::kOriginal: out << "original"; break;
      case EditTag::kEdited: out << "edited"; break;
    }
    out << "\n";
  }
  write_file_atomic(path, out.str());
}

Dataset load_dataset(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  auto lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw DataError("empty dataset file: " + path.string());

  auto header = parse_header(lines[0]);
  auto need = [&](const char* key) -> const std::string& {
    auto it = header.find(key);
    if (it == header.end()) {
      throw DataError(std::string("dataset header missing '") + key + "'");
    }
    return it->second;
  };
  if (need("v") != "1") throw DataError("unsupported dataset version " + need("v"));

  Dataset ds;
  ds.kind = need("kind");
  ds.world = parse_world_field(need("world"), need("rules"));
  ds.world.validate();
  const uint64_t stated = parse_hex_u64(need("hash"));
  if (ds.world.hash() != stated) {
    throw DataError("world hash mismatch in " + path.string() + ": header says " +
                    hex_u64(stated) + ", canonical world hashes to " +
                    hex_u64(ds.world.hash()));
  }
  ds.stream = need("stream");
  if (need("flavor") != "-") ds.flavor = parse_probe_flavor(need("flavor"));
  ds.confounds = parse_confound_field(ds.world, need("confound"));

  const size_t n = std::stoull(need("n"));
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto rec = parse_record(lines[i]);
    if (ds.kind == "corpus") {
      CaptionSample c;
      c.scene = parse_scene_field(rec.at("slots"));
      c.caption = parse_ints(rec.at("caption"), ',');
      ds.captions.push_back(std::move(c));
    } else if (ds.kind == "probes") {
      ProbeRecord p;
      p.scene = parse_scene_field(rec.at("slots"));
      p.question = parse_ints(rec.at("q"), ',');
      const std::string& a = rec.at("a");
      if (a != "yes" && a != "no") throw DataError("bad answer '" + a + "'");
      p.answer_yes = (a == "yes");
      const std::string& k = rec.at("kind");
      if (k == "positive") p.kind = ProbeKind::kPositive;
      else if (k == "adversarial_negative") p.kind = ProbeKind::kAdversarialNegative;
      else if (k == "random_negative") p.kind = ProbeKind::kRandomNegative;
      else throw DataError("bad probe kind '" + k + "'");
      p.pair_id = std::stoi(rec.at("pair"));
      const std::string& e = rec.at("edit");
      if (e == "-") p.edit = EditTag::kNone;
      else if (e == "original") p.edit = EditTag::kOriginal;
      else if (e == "edited") p.edit = EditTag::kEdited;
      else throw DataError("bad edit tag '" + e + "'");
      ds.probes.push_back(std::move(p));
    } else {
      throw DataError("unknown dataset kind '" + ds.kind + "'");
    }
  }
  const size_t got = ds.kind == "corpus" ? ds.captions.size() : ds.probes.size();
  if (got != n) {
    throw DataError("dataset record count " + std::to_string(got) +
                    " does not match header n=" + std::to_string(n));
  }
  return ds;
}

}  // namespace vlab
