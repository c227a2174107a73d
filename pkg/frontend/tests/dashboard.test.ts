import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { disabledTooltip, enabledActions, isEnabled } from "../src/dashboard.js";
import { fieldEditor } from "../src/docks.js";
import phaseChoices from "./fixtures/phase_choices.json";

describe("session action gating", () => {
  it("mirrors the server transition table", () => {
    expect(enabledActions("WAITING")).toEqual(["start", "delete"]);
    expect(enabledActions("RUNNING")).toEqual(["pause", "abort"]);
    expect(enabledActions("PAUSED")).toEqual(["resume", "delete"]);
    expect(enabledActions("FINISHED")).toEqual(["delete"]);
    expect(enabledActions("FAILED")).toEqual(["delete"]);
  });

  it("illegal pairs surface as tooltips, not requests", () => {
    expect(isEnabled("WAITING", "pause")).toBe(false);
    expect(disabledTooltip("WAITING", "pause")).toBe(
      "cannot pause a WAITING session",
    );
    expect(disabledTooltip("RUNNING", "pause")).toBeNull();
  });
});

describe("phase dropdown", () => {
  it("lists exactly TRAIN and TEST", async () => {
    const fetchFn = async (url: string): Promise<Response> => {
      expect(url).toContain("/api/catalog/choices");
      expect(url).toContain("message=caffe.NetStateRule");
      expect(url).toContain("field=phase");
      return new Response(JSON.stringify(phaseChoices), { status: 200 });
    };
    const editor = await fieldEditor(
      new ApiClient(fetchFn),
      "caffe.NetStateRule",
      "phase",
      "enum",
    );
    expect(editor.control).toBe("dropdown");
    expect(editor.choices).toEqual(["TRAIN", "TEST"]);
  });
});

describe("api error mapping", () => {
  it("raises ApiError with the server code", async () => {
    const fetchFn = async (): Promise<Response> =>
      new Response(
        JSON.stringify({ code: "IllegalTransition", detail: "WAITING -> pause" }),
        { status: 409 },
      );
    const api = new ApiClient(fetchFn);
    await expect(api.sessionAction(1, "pause")).rejects.toMatchObject({
      status: 409,
      code: "IllegalTransition",
    });
  });
});
