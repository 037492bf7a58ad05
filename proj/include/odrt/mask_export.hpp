#pragma once

#include <string>
#include <vector>

#include "odrt/pruner.hpp"

namespace odrt {

struct MaskExportRow {
  int r = 0;
  int k = 0;
  int b = 0;
  BlockChoice choice = BlockChoice::Compute;
  GatingVector p{};
  bool forced = false;
};

// Flattened masks of one episode (or several diffusions), one row per cell.
struct MaskExport {
  int num_blocks = 0;
  int steps = 0;
  std::vector<MaskExportRow> rows;

  std::vector<int> iterations() const;
  int compute_count() const;
  // 1 - C / (B * K * R)
  double sparsity() const;
};

// Rows ordered by r, then k from K down to 1, then b.
MaskExport mask_export(const std::vector<MaskPlan>& plans);
// Confidences sum to 1 within 1e-9 and each unforced choice is the
// tie-broken argmax. Throws a data error naming the first bad row.
void validate_mask_export(const MaskExport& e);

// Header: r,k,b,choice,p_C,p_F,p_T,p_R,forced. `preamble` lines are written
// first as '#' comments.
std::string mask_export_csv(const MaskExport& e, const std::vector<std::string>& preamble = {});
MaskExport parse_mask_export_csv(const std::string& text);

// K x B grid for iteration r: columns k = K..1 left to right, rows b = 1..B
// top to bottom, each cell split into four bands sized by p_C, p_F, p_T, p_R.
std::string render_mask_svg(const MaskExport& e, int r, const std::string& comment = {});

}  // namespace odrt
