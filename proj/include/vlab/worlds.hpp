#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vlab/tensor.hpp"
#include "vlab/vocab.hpp"

namespace vlab {

// P(companion present | anchor present) is forced to `prob` by the scene
// sampler: whenever the anchor is drawn, companion membership is re-rolled as
// a Bernoulli(prob).
struct CoOccurrenceRule {
  int anchor = 0;
  int companion = 0;
  double prob = 0.0;

  bool operator==(const CoOccurrenceRule&) const = default;
};

struct WorldSpec {
  int n_types = 20;     // object vocabulary size M
  int d_obj = 16;       // per-type feature width
  int d_v = 32;         // encoder stub output width
  int n_slots = 16;     // grid slots; one visual token per slot
  int n_colors = 6;
  int min_objects = 2;  // base draw before co-occurrence rules apply
  int max_objects = 4;
  uint64_t seed = 0;
  std::vector<CoOccurrenceRule> rules;

  // Two disjoint planted associations: cup->plate and dog->ball.
  static WorldSpec defaults(uint64_t seed, double confound_prob);

  void validate() const;
  bool confounded() const;  // any rule with prob > 0

  // Canonical text form; the 64-bit world hash is FNV-1a over these bytes.
  std::string canonical() const;
  uint64_t hash() const;

  bool operator==(const WorldSpec&) const = default;
};

struct PlacedObject {
  int slot = 0;
  int type = 0;
  int color = 0;

  bool operator==(const PlacedObject&) const = default;
};

// Objects sorted by slot; each type appears at most once (the sampler draws
// distinct types, which keeps every object a single instance of its type).
struct Scene {
  std::vector<PlacedObject> objects;

  bool has_type(int type) const;
  const PlacedObject* find_type(int type) const;
  std::vector<int> present_types() const;  // sorted

  bool operator==(const Scene&) const = default;
};

enum class ProbeKind { kPositive, kAdversarialNegative, kRandomNegative };
enum class ProbeFlavor { kPope, kMmvpPairs, kMerlinEdit };
enum class EditTag { kNone, kOriginal, kEdited };

const char* probe_kind_name(ProbeKind k);
const char* probe_flavor_name(ProbeFlavor f);
ProbeFlavor parse_probe_flavor(const std::string& s);

struct ProbeRecord {
  Scene scene;
  std::vector<int> question;  // token ids: is <object> present ?
  bool answer_yes = false;
  ProbeKind kind = ProbeKind::kPositive;
  int pair_id = -1;  // shared by the records of one mmvp pair / merlin group
  EditTag edit = EditTag::kNone;
};

struct CaptionSample {
  Scene scene;
  std::vector<int> caption;  // body tokens, preamble excluded
};

struct ConfoundStat {
  CoOccurrenceRule rule;
  int anchor_scenes = 0;
  int companion_scenes = 0;  // among anchor_scenes
  double empirical() const {
    return anchor_scenes == 0 ? 0.0 : double(companion_scenes) / anchor_scenes;
  }
};

// Token template pieces. The text prefix before the visual block is always 3
// tokens, so the sequence split index k == 3 for every generated sample.
std::vector<int> caption_preamble();                 // <bos> describe :
std::vector<int> probe_preamble();                   // <bos> look :
std::vector<int> question_tokens(int object_type);   // is <obj> present ?
std::vector<int> caption_body(const Scene& scene);   // a <color> <obj> (and <color> <obj>)*
constexpr int kPreambleLen = 3;

// WorldSpec plus the frozen derived state: per-type features, the encoder
// stub weights, and the empty-slot token. All of it is a pure function of the
// spec, never trained.
class World {
 public:
  explicit World(WorldSpec spec);

  const WorldSpec& spec() const { return spec_; }
  uint64_t hash() const { return hash_; }

  Scene sample_scene(const std::string& stream, uint64_t index) const;

  // One d_v token per slot: occupied slots emit a frozen linear map of
  // (type feature | color one-hot | slot one-hot); empty slots emit the fixed
  // null token.
  TensorF encode_scene(const Scene& scene) const;

  // Absent types that rank in the top-k (k=3) companions of any present
  // anchor, sorted ascending. POPE-style adversarial candidates.
  std::vector<int> adversarial_candidates(const Scene& scene) const;

  static constexpr int kTopCompanions = 3;

 private:
  WorldSpec spec_;
  uint64_t hash_ = 0;
  std::vector<double> type_features_;  // n_types x d_obj
  std::vector<double> encoder_;        // (d_obj + n_colors + n_slots) x d_v
  std::vector<double> null_token_;     // d_v
};

std::vector<CaptionSample> gen_pretrain_corpus(const World& world, int n,
                                               const std::string& stream = "corpus");

// pope: balanced yes/no, negatives alternating adversarial/random.
// mmvp_pairs: n/2 pairs (n even) differing in exactly one object's color.
// merlin_edit: n/4 groups (n % 4 == 0) of original/edited scenes where the
// edit removes the single instance of one type.
std::vector<ProbeRecord> gen_probe_set(const World& world, int n, ProbeFlavor flavor,
                                       const std::string& stream = "probes");

std::vector<ConfoundStat> measure_confounds(const WorldSpec& spec,
                                            const std::vector<Scene>& scenes);

// ---------------------------------------------------------------------------
// Dataset files: one '#vlab' header line carrying the generator version, the
// world (reconstructible and hash-checked on load), the stream tag, and the
// measured confound stats; then one '|'-separated record per line.
// ---------------------------------------------------------------------------
struct Dataset {
  WorldSpec world;
  std::string kind;  // "corpus" or "probes"
  std::optional<ProbeFlavor> flavor;
  std::string stream;
  std::vector<CaptionSample> captions;
  std::vector<ProbeRecord> probes;
  std::vector<ConfoundStat> confounds;
};

void save_corpus(const std::filesystem::path& path, const World& world,
                 const std::vector<CaptionSample>& captions, const std::string& stream);
void save_probes(const std::filesystem::path& path, const World& world, ProbeFlavor flavor,
                 const std::vector<ProbeRecord>& probes, const std::string& stream);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace vlab
