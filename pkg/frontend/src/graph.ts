/** Canvas view model and SVG rendering for the network editor. */

import type { CatalogEntry, EdgeView, NetView } from "./api.js";
import { categoryColor } from "./colors.js";

export interface CanvasNode {
  layerName: string;
  typeName: string;
  categoryColor: string;
  position: [number, number];
  selected: boolean;
}

export const NODE_WIDTH = 140;
export const NODE_HEIGHT = 44;

export function buildNodes(net: NetView, catalog: CatalogEntry[]): CanvasNode[] {
  const categories = new Map(catalog.map((k) => [k.typeName, k.category]));
  return net.layers.map((layer) => ({
    layerName: layer.name,
    typeName: layer.typeName,
    categoryColor: categoryColor(categories.get(layer.typeName)),
    position: layer.position,
    selected: false,
  }));
}

/** Edges to draw: everything except blobs the user has hidden. */
export function visibleEdges(net: NetView): EdgeView[] {
  const hidden = new Set(net.uiState.hiddenEdgeBlobs);
  return net.edges.filter((edge) => !hidden.has(edge.blobName));
}

/** Orthogonal polyline between two node anchors (bottom of producer to top
 * of consumer): down, across, down. */
export function edgePoints(
  from: [number, number],
  to: [number, number],
): [number, number][] {
  const start: [number, number] = [from[0] + NODE_WIDTH / 2, from[1] + NODE_HEIGHT];
  const end: [number, number] = [to[0] + NODE_WIDTH / 2, to[1]];
  const midY = (start[1] + end[1]) / 2;
  return [start, [start[0], midY], [end[0], midY], end];
}

function escapeXml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Render the whole net as a standalone SVG string. */
export function renderSvg(net: NetView, catalog: CatalogEntry[]): string {
  const nodes = buildNodes(net, catalog);
  const byName = new Map(nodes.map((n) => [n.layerName, n]));
  const parts: string[] = [];

  for (const edge of visibleEdges(net)) {
    const from = byName.get(edge.producer.layer);
    const to = byName.get(edge.consumer.layer);
    if (!from || !to) continue;
    const points = edgePoints(from.position, to.position)
      .map(([x, y]) => `${x},${y}`)
      .join(" ");
    const dash = edge.isInPlace ? ' stroke-dasharray="4 3"' : "";
    parts.push(
      `<polyline class="edge" data-blob="${escapeXml(edge.blobName)}" ` +
        `points="${points}" fill="none" stroke="black"${dash}/>`,
    );
  }

  for (const node of nodes) {
    const [x, y] = node.position;
    parts.push(
      `<g class="node" data-layer="${escapeXml(node.layerName)}">` +
        `<rect x="${x}" y="${y}" width="${NODE_WIDTH}" height="${NODE_HEIGHT}" ` +
        `rx="6" fill="${node.categoryColor}" stroke="black"/>` +
        `<text x="${x + NODE_WIDTH / 2}" y="${y + 18}" text-anchor="middle">` +
        `${escapeXml(node.layerName)}</text>` +
        `<text x="${x + NODE_WIDTH / 2}" y="${y + 34}" text-anchor="middle" ` +
        `font-size="10">${escapeXml(node.typeName)}</text></g>`,
    );
  }

  const width = Math.max(...nodes.map((n) => n.position[0]), 0) + NODE_WIDTH + 40;
  const height = Math.max(...nodes.map((n) => n.position[1]), 0) + NODE_HEIGHT + 40;
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}">` +
    parts.join("") +
    `</svg>`
  );
}
