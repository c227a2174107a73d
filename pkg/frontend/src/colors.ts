/** Fixed node palette: one color per layer-catalog category. */

export const CATEGORY_COLORS: Record<string, string> = {
  data: "blue",
  vision: "green",
  activation: "yellow",
  loss: "red",
  common: "gray",
  other: "white",
};

export function categoryColor(category: string | undefined): string {
  return CATEGORY_COLORS[category ?? "other"] ?? CATEGORY_COLORS.other;
}
