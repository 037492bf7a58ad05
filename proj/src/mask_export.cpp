#include "odrt/mask_export.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "odrt/error.hpp"

namespace odrt {

std::vector<int> MaskExport::iterations() const {
  std::set<int> rs;
  for (const auto& row : rows) rs.insert(row.r);
  return {rs.begin(), rs.end()};
}

int MaskExport::compute_count() const {
  return static_cast<int>(std::count_if(rows.begin(), rows.end(),
                                        [](const MaskExportRow& r) { return r.choice == BlockChoice::Compute; }));
}

double MaskExport::sparsity() const {
  if (rows.empty()) return 0.0;
  return 1.0 - static_cast<double>(compute_count()) / static_cast<double>(rows.size());
}

MaskExport mask_export(const std::vector<MaskPlan>& plans) {
  MaskExport e;
  for (const auto& plan : plans) {
    if (e.rows.empty()) {
      e.num_blocks = plan.num_blocks;
      e.steps = plan.steps;
    } else if (plan.num_blocks != e.num_blocks || plan.steps != e.steps) {
      fail(ErrorKind::Data, "mask plans disagree on lattice size");
    }
    for (int k = plan.steps; k >= 1; --k) {
      for (int b = 1; b <= plan.num_blocks; ++b) {
        e.rows.push_back({plan.r, k, b, plan.choice(b, k), plan.probs(b, k), plan.is_forced(b, k)});
      }
    }
  }
  return e;
}

void validate_mask_export(const MaskExport& e) {
  for (std::size_t i = 0; i < e.rows.size(); ++i) {
    const MaskExportRow& row = e.rows[i];
    auto where = [&] {
      return "mask row " + std::to_string(i) + " (r=" + std::to_string(row.r) + ", k=" + std::to_string(row.k) +
             ", b=" + std::to_string(row.b) + ")";
    };
    const double sum = row.p[0] + row.p[1] + row.p[2] + row.p[3];
    if (std::abs(sum - 1.0) > 1e-9) fail(ErrorKind::Data, where() + ": confidences sum to " + std::to_string(sum));
    if (!row.forced && discretize(row.p) != row.choice) {
      fail(ErrorKind::Data, where() + ": choice " + choice_letter(row.choice) + " is not the argmax");
    }
  }
}

std::string mask_export_csv(const MaskExport& e, const std::vector<std::string>& preamble) {
  std::string s;
  for (const auto& line : preamble) s += "# " + line + "\n";
  s += "r,k,b,choice,p_C,p_F,p_T,p_R,forced\n";
  char buf[256];
  for (const auto& row : e.rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%c,%.17g,%.17g,%.17g,%.17g,%d\n", row.r, row.k, row.b,
                  choice_letter(row.choice), row.p[0], row.p[1], row.p[2], row.p[3], row.forced ? 1 : 0);
    s += buf;
  }
  return s;
}

namespace {

BlockChoice choice_from_letter(char c, std::size_t line) {
  switch (c) {
    case 'C': return BlockChoice::Compute;
    case 'F': return BlockChoice::Forward;
    case 'T': return BlockChoice::Timestep;
    case 'R': return BlockChoice::Rollout;
  }
  fail(ErrorKind::Data, "mask csv line " + std::to_string(line) + ": unknown choice '" + std::string(1, c) + "'");
}

}  // namespace

MaskExport parse_mask_export_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  MaskExport e;
  bool header = false;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "r,k,b,choice,p_C,p_F,p_T,p_R,forced") fail(ErrorKind::Data, "mask csv: unexpected header");
      header = true;
      continue;
    }
    MaskExportRow row;
    char c = 0;
    int forced = 0;
    if (std::sscanf(line.c_str(), "%d,%d,%d,%c,%lf,%lf,%lf,%lf,%d", &row.r, &row.k, &row.b, &c, &row.p[0], &row.p[1],
                    &row.p[2], &row.p[3], &forced) != 9) {
      fail(ErrorKind::Data, "mask csv line " + std::to_string(n) + " is malformed");
    }
    row.choice = choice_from_letter(c, n);
    row.forced = forced != 0;
    e.num_blocks = std::max(e.num_blocks, row.b);
    e.steps = std::max(e.steps, row.k);
    e.rows.push_back(row);
  }
  if (!header) fail(ErrorKind::Data, "mask csv: missing header");
  return e;
}

std::string render_mask_svg(const MaskExport& e, int r, const std::string& comment) {
  std::vector<const MaskExportRow*> rows;
  for (const auto& row : e.rows)
    if (row.r == r) rows.push_back(&row);
  if (rows.empty()) fail(ErrorKind::Data, "mask export has no iteration r=" + std::to_string(r));

  constexpr int cell = 16, margin = 40, legend = 28;
  static const char* colors[4] = {"#2b6cb0", "#dd6b20", "#38a169", "#805ad5"};
  const int K = e.steps, B = e.num_blocks;
  const int width = margin + K * cell + 10;
  const int height = margin + B * cell + legend;
  char buf[256];
  std::string s;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\">\n", width,
                height, width, height);
  s += buf;
  if (!comment.empty()) s += "<!-- " + comment + " -->\n";
  std::snprintf(buf, sizeof buf,
                "<text x=\"%d\" y=\"14\" font-family=\"monospace\" font-size=\"11\">r=%d  columns k=%d..1, rows "
                "b=1..%d</text>\n",
                margin, r, K, B);
  s += buf;
  for (const MaskExportRow* row : rows) {
    const double x = margin + (K - row->k) * cell;
    const double y = margin + (row->b - 1) * cell;
    double off = 0.0;
    for (int c = 0; c < 4; ++c) {
      const double h = row->p[static_cast<std::size_t>(c)] * cell;
      if (h > 0.0) {
        std::snprintf(buf, sizeof buf, "<rect x=\"%.3f\" y=\"%.3f\" width=\"%d\" height=\"%.3f\" fill=\"%s\"/>\n", x,
                      y + off, cell, h, colors[c]);
        s += buf;
      }
      off += h;
    }
    if (row->choice != BlockChoice::Compute) {
      std::snprintf(buf, sizeof buf,
                    "<text x=\"%.3f\" y=\"%.3f\" font-family=\"monospace\" font-size=\"9\" fill=\"#fff\">%c</text>\n",
                    x + 5.0, y + 12.0, choice_letter(row->choice));
      s += buf;
    }
  }
  const int ly = margin + B * cell + 18;
  for (int c = 0; c < 4; ++c) {
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%d\" y=\"%d\" width=\"10\" height=\"10\" fill=\"%s\"/><text x=\"%d\" y=\"%d\" "
                  "font-family=\"monospace\" font-size=\"10\">%c</text>\n",
                  margin + c * 40, ly - 9, colors[c], margin + c * 40 + 13, ly, "CFTR"[c]);
    s += buf;
  }
  s += "</svg>\n";
  return s;
}

}  // namespace odrt
