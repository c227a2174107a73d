/** Layer palette: text-search filtering plus the drag-drop add flow. */

import type { ApiClient, CatalogEntry, NetView } from "./api.js";

export function filterPalette(entries: CatalogEntry[], query: string): CatalogEntry[] {
  const needle = query.trim().toLowerCase();
  if (!needle) return [...entries];
  return entries.filter((entry) => entry.typeName.toLowerCase().includes(needle));
}

/** Dropping a palette item on the canvas adds a layer at the drop point and
 * returns the server's updated net (read-your-write; no optimistic state). */
export function dropLayer(
  api: ApiClient,
  typeName: string,
  position: [number, number],
): Promise<NetView> {
  return api.addLayer(typeName, undefined, position);
}
