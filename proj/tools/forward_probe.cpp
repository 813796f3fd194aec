// Runs one forward pass and writes the raw results: aggregated features,
// RPN logits and deltas, then the final detections, all as little-endian
// f64. Built twice, once with SLICEATTN_NO_ATTENTION, so the two binaries
// can be compared byte for byte.
//
// usage: forward_probe CHECKPOINT PIPELINE_CFG VOLUME KEY_SLICE OUT_FILE

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "sliceattn.hpp"

using namespace sliceattn;

int main(int argc, char** argv) {
  if (argc != 6) {
    std::fprintf(stderr, "error: usage: %s CHECKPOINT PIPELINE_CFG VOLUME KEY_SLICE OUT_FILE\n",
                 argv[0]);
    return 1;
  }
  try {
    ParamStore params = load_checkpoint(argv[1]);
    const PipelineConfig config = load_pipeline_config(argv[2]);
    const Volume vol = load_volume(argv[3]);
    const SliceDeck deck = extract_deck(vol.slices, std::stoul(argv[4]), config.M,
                                        vol.slice_interval_mm, "probe");
    Graph g;
    BoundParams bound(g, params);
    const PipelineForward f = forward_pipeline(g, bound, config, deck);
    io::ByteWriter w;
    for (const Tensor* t : {&f.features.value(), &f.rpn.logits.value(), &f.rpn.deltas.value()}) {
      w.u64(t->numel());
      for (double v : t->data()) w.f64(v);
    }
    const std::vector<Detection> dets = propose_and_detect(f, bound, config);
    w.u64(dets.size());
    for (const Detection& d : dets) {
      for (double v : {d.score, d.box.x1, d.box.y1, d.box.x2, d.box.y2}) w.f64(v);
    }
    io::write_file(argv[5], w.bytes());
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 2;
  }
  return 0;
}
