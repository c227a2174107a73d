/** Property docks: type-appropriate editors for layer/solver fields.
 * Enum and bool fields render as dropdowns filled from the catalog. */

import type { ApiClient } from "./api.js";

export interface FieldEditor {
  field: string;
  control: "dropdown" | "checkbox" | "number" | "text";
  choices: string[];
}

/** Editor descriptor for one field, asking the service for valid choices.
 * A non-empty choice list means the field renders as a dropdown. */
export async function fieldEditor(
  api: ApiClient,
  message: string,
  field: string,
  kind: "enum" | "bool" | "number" | "string",
): Promise<FieldEditor> {
  if (kind === "enum" || kind === "bool") {
    const { choices } = await api.catalogChoices(message, field);
    return {
      field,
      control: kind === "bool" ? "checkbox" : "dropdown",
      choices,
    };
  }
  return {
    field,
    control: kind === "number" ? "number" : "text",
    choices: [],
  };
}
