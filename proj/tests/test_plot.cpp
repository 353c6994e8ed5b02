#include <gtest/gtest.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <sstream>

#include "opdlab/cli.hpp"
#include "opdlab/plot.hpp"
#include "support.hpp"

using namespace opdlab;
using testsupport::TempDir;

namespace pt = boost::property_tree;

namespace {

std::vector<runner::MetricsRecord> series(int n, double phase) {
  std::vector<runner::MetricsRecord> out;
  for (int i = 0; i < n; ++i) {
    runner::MetricsRecord r;
    r.step = i;
    r.mean_reward = 0.5 + 0.4 * std::sin(i * 0.3 + phase);
    r.mean_response_length = 4.0 + i * phase;
    r.grad_norm = std::exp(0.1 * i + phase);
    out.push_back(r);
  }
  return out;
}

void write_jsonl(const std::filesystem::path& p, const std::vector<runner::MetricsRecord>& recs) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p);
  for (const auto& r : recs) out << runner::to_json(r).dump() << '\n';
}

pt::ptree parse_svg(const std::string& svg) {
  std::istringstream in(svg);
  pt::ptree tree;
  pt::read_xml(in, tree);
  return tree;
}

}  // namespace

TEST(Plot, ThreePanelsWithOnePolylinePerInput) {
  TempDir dir("plot");
  const auto a = series(30, 0.0), b = series(20, 1.5);
  write_jsonl(dir / "grpo" / "metrics.jsonl", a);
  write_jsonl(dir / "tgpo" / "metrics.jsonl", b);
  const char* argv[] = {"opdlab", "plot", nullptr, nullptr, "--out", nullptr};
  const auto pa = (dir / "grpo" / "metrics.jsonl").string(), pb = (dir / "tgpo" / "metrics.jsonl").string(),
             po = (dir / "out" / "m.svg").string();
  argv[2] = pa.c_str();
  argv[3] = pb.c_str();
  argv[5] = po.c_str();
  std::ostringstream os, es;
  ASSERT_EQ(cli::run(6, argv, os, es), 0) << es.str();

  std::ifstream in(po);
  std::stringstream buf;
  buf << in.rdbuf();
  const auto tree = parse_svg(buf.str());
  const auto& svg = tree.get_child("svg");
  int panels = 0;
  for (const auto& [tag, node] : svg) {
    if (tag != "g" || node.get<std::string>("<xmlattr>.class") != "panel") continue;
    ++panels;
    std::vector<std::string> labels;
    for (const auto& [t, child] : node)
      if (t == "polyline") labels.push_back(child.get<std::string>("<xmlattr>.data-label"));
    EXPECT_EQ(labels, (std::vector<std::string>{"grpo", "tgpo"}));

    const auto metric = node.get<std::string>("<xmlattr>.data-metric");
    const plot::Panel* panel = nullptr;
    for (const auto& p : plot::panels())
      if (metric == p.metric) panel = &p;
    ASSERT_NE(panel, nullptr) << metric;
    double lo = 1e300, hi = -1e300;
    for (const auto* s : {&a, &b})
      for (const auto& r : *s) {
        lo = std::min(lo, panel->get(r));
        hi = std::max(hi, panel->get(r));
      }
    EXPECT_EQ(node.get<double>("<xmlattr>.data-ymin"), lo);
    EXPECT_EQ(node.get<double>("<xmlattr>.data-ymax"), hi);
    EXPECT_EQ(node.get<double>("<xmlattr>.data-xmin"), 0.0);
    EXPECT_EQ(node.get<double>("<xmlattr>.data-xmax"), 29.0);
  }
  EXPECT_EQ(panels, 3);
}

TEST(Plot, PointsStayInsidePanel) {
  const auto svg = plot::render_svg({{"a&b", series(10, 0.2)}});
  const auto tree = parse_svg(svg);
  for (const auto& [tag, node] : tree.get_child("svg")) {
    if (tag != "g" || node.get<std::string>("<xmlattr>.class") != "panel") continue;
    const auto& rect = node.get_child("rect.<xmlattr>");
    const double x = rect.get<double>("x"), y = rect.get<double>("y");
    const double w = rect.get<double>("width"), h = rect.get<double>("height");
    const auto& line = node.get_child("polyline.<xmlattr>");
    EXPECT_EQ(line.get<std::string>("data-label"), "a&b");
    std::istringstream pts(line.get<std::string>("points"));
    int count = 0;
    for (std::string p; pts >> p; ++count) {
      const auto comma = p.find(',');
      const double px = std::stod(p.substr(0, comma)), py = std::stod(p.substr(comma + 1));
      EXPECT_GE(px, x - 1e-6);
      EXPECT_LE(px, x + w + 1e-6);
      EXPECT_GE(py, y - 1e-6);
      EXPECT_LE(py, y + h + 1e-6);
    }
    EXPECT_EQ(count, 10);
  }
}

TEST(Plot, FlatSeriesAndNonFiniteValues) {
  auto recs = series(5, 0.0);
  for (auto& r : recs) r.mean_response_length = 3.0;
  recs[2].grad_norm = std::nan("");
  const auto tree = parse_svg(plot::render_svg({{"flat", recs}}));
  for (const auto& [tag, node] : tree.get_child("svg")) {
    if (tag != "g" || node.get<std::string>("<xmlattr>.class") != "panel") continue;
    if (node.get<std::string>("<xmlattr>.data-metric") == "mean_response_length") {
      EXPECT_EQ(node.get<double>("<xmlattr>.data-ymin"), 2.5);
      EXPECT_EQ(node.get<double>("<xmlattr>.data-ymax"), 3.5);
    }
  }
  EXPECT_THROW(plot::render_svg({}), std::invalid_argument);
}
