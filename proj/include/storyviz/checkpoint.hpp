#pragma once

#include <string>
#include <vector>

#include "storyviz/char_ldm.hpp"
#include "storyviz/story_lm.hpp"

namespace storyviz {

// ---------------------------------------------------------------------------
// Single-file checkpoint container: magic + version, a JSON header (stage
// tag, config echo, vocabulary, RNG state, parameter index), length-prefixed
// float32 blobs in index order, and a trailing CRC32 over everything before
// it. Round trips are bit-exact.
// ---------------------------------------------------------------------------

struct CheckpointParam {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<float> data;
};

struct CheckpointState {
    int schema_version = 1;
    std::string stage;  // "stage1" or "stage2"
    std::string config_echo;
    std::vector<std::string> vocab;
    std::vector<std::string> roster;  // tokenizer roster names, caption order
    std::string rng_state;            // training stream, for exact resume
    std::vector<CheckpointParam> params;
};

void save_checkpoint(const CheckpointState& state, const std::string& path);
CheckpointState load_checkpoint(const std::string& path);

// Peeks at the stage tag without unpacking parameter blobs (still verifies
// the container). Convenience for error messages and CLI dispatch.
std::string checkpoint_stage(const std::string& path);

// Store <-> container transfer. Applying requires every store parameter to
// be present with matching shape; parameters in the file that the store does
// not know are rejected by name.
void collect_params(const ParamStore<float>& store, CheckpointState& state);
void apply_params(ParamStore<float>& store, const CheckpointState& state);

// Model-level helpers. The stage-2 container carries BOTH stores (the frozen
// stage-1 backbone plus the LM and mapper) so it alone can drive inference.
CheckpointState checkpoint_from_stage1(const Stage1Model<float>& model,
                                       const std::string& config_echo,
                                       const std::string& rng_state);
CheckpointState checkpoint_from_stage2(const Stage1Model<float>& stage1,
                                       const Stage2Model<float>& stage2,
                                       const std::string& config_echo,
                                       const std::string& rng_state);

// Stage-tag contract: a stage-1 restore refuses stage-2 files; the stage-2
// restore accepts only the richer stage-2 container. Loading a stage-1 file
// as the frozen backbone of a fresh stage-2 run goes through restore_stage1.
void restore_stage1(Stage1Model<float>& model, const CheckpointState& state);
void restore_stage2(Stage1Model<float>& stage1, Stage2Model<float>& stage2,
                    const CheckpointState& state);

}  // namespace storyviz
