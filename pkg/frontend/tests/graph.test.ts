import { describe, expect, it } from "vitest";

import type { CatalogEntry, NetView } from "../src/api.js";
import { CATEGORY_COLORS } from "../src/colors.js";
import { buildNodes, renderSvg, visibleEdges } from "../src/graph.js";
import catalogFixture from "./fixtures/catalog.json";
import netFixture from "./fixtures/net.json";

const net = netFixture as unknown as NetView;
const catalog = catalogFixture as CatalogEntry[];

describe("canvas view model", () => {
  it("renders the fixture as 7 color-coded nodes", () => {
    const nodes = buildNodes(net, catalog);
    expect(nodes).toHaveLength(7);
    const palette = Object.values(CATEGORY_COLORS);
    for (const node of nodes) {
      expect(palette).toContain(node.categoryColor);
    }
  });

  it("colors the loss node red and the data node blue", () => {
    const byName = new Map(buildNodes(net, catalog).map((n) => [n.layerName, n]));
    expect(byName.get("loss")?.categoryColor).toBe("red");
    expect(byName.get("mnist")?.categoryColor).toBe("blue");
    expect(byName.get("conv1")?.categoryColor).toBe("green");
  });

  it("unknown layer types fall back to the 'other' color", () => {
    const nodes = buildNodes(
      { ...net, layers: [{ ...net.layers[0], typeName: "Mystery" }] },
      catalog,
    );
    expect(nodes[0].categoryColor).toBe("white");
  });

  it("hiding a blob removes its edges but no nodes", () => {
    const before = visibleEdges(net).length;
    const labelEdges = net.edges.filter((e) => e.blobName === "label").length;
    expect(labelEdges).toBeGreaterThan(0);

    const hidden: NetView = {
      ...net,
      uiState: { ...net.uiState, hiddenEdgeBlobs: ["label"] },
    };
    expect(visibleEdges(hidden)).toHaveLength(before - labelEdges);
    expect(buildNodes(hidden, catalog)).toHaveLength(7);
  });

  it("emits one rect per layer and dashes in-place edges", () => {
    const svg = renderSvg(net, catalog);
    expect(svg.match(/<rect /g)).toHaveLength(7);
    expect(svg).toContain('fill="red"');
    const inPlace = net.edges.filter((e) => e.isInPlace).length;
    expect((svg.match(/stroke-dasharray/g) ?? []).length).toBe(inPlace);
  });
});
