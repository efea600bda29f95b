import { beforeEach, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api";
import { createApp, type AppHandle } from "../src/app";
import { createFakeServer, type FakeServer } from "./fake-server";

let server: FakeServer;
let app: AppHandle;
let root: HTMLElement;

function pngFile(): File {
  return new File([new Uint8Array([0x89, 0x50, 0x4e, 0x47])], "input.png",
                  { type: "image/png" });
}

function setImage(file: File | null) {
  const input = root.querySelector("#image-input") as HTMLInputElement;
  Object.defineProperty(input, "files",
                        { value: file ? [file] : [], configurable: true });
}

function setInstruction(text: string) {
  (root.querySelector("#instruction") as HTMLInputElement).value = text;
}

function text(selector: string): string {
  return (root.querySelector(selector) as HTMLElement).textContent ?? "";
}

beforeEach(async () => {
  document.body.innerHTML = '<div id="app"></div>';
  root = document.getElementById("app")!;
  server = createFakeServer();
  app = await createApp(root, new ApiClient("", server.fetch),
                        { pollIntervalMs: 1 });
});

describe("submit flow", () => {
  it("runs submit -> progress -> gallery", async () => {
    setImage(pngFile());
    setInstruction("make the sky pink");
    const view = await app.submit();
    expect(view?.status).toBe("done");

    expect(app.gallery).toHaveLength(1);
    expect(app.gallery[0]?.weight).toBe(1.0);
    const panes = root.querySelectorAll("#gallery figure");
    expect(panes).toHaveLength(1);
    expect(panes[0]?.getAttribute("data-weight")).toBe("1");
    expect(panes[0]?.querySelector("img")?.getAttribute("src"))
      .toContain("/images/");
    expect(text("#status-text")).toContain("done");
    const doneChip = root.querySelector('.stage[data-stage="done"]');
    expect(doneChip?.classList.contains("active")).toBe(true);
  });

  it("rejects an empty instruction inline without any network call", async () => {
    setImage(pngFile());
    setInstruction("   ");
    const view = await app.submit();
    expect(view).toBeNull();
    expect(text("#instruction-error")).toContain("non-empty");
    expect(server.calls.submit).toBe(0);
  });

  it("requires an image before submitting", async () => {
    setImage(null);
    setInstruction("add a hat");
    const view = await app.submit();
    expect(view).toBeNull();
    expect(text("#image-error")).toContain("image");
    expect(server.calls.submit).toBe(0);
  });

  it("round-trips an edited after-caption through the job view", async () => {
    setImage(pngFile());
    setInstruction("make the sky pink");
    const override = root.querySelector("#after-caption") as HTMLInputElement;
    override.value = "a hand-corrected after caption";
    await app.submit();
    const afterView = root.querySelector("#caption-after-view") as HTMLInputElement;
    expect(afterView.value).toBe("a hand-corrected after caption");
  });

  it("renders server-side validation errors at the offending field", async () => {
    const rejecting: typeof fetch = async (input, init) => {
      if (String(input).endsWith("/config")) return server.fetch(input, init);
      return new Response(
        JSON.stringify({ error: "instruction must be non-empty",
                         field: "instruction" }),
        { status: 422, headers: { "Content-Type": "application/json" } });
    };
    document.body.innerHTML = '<div id="app"></div>';
    root = document.getElementById("app")!;
    const strictApp = await createApp(root, new ApiClient("", rejecting),
                                      { pollIntervalMs: 1 });
    setImage(pngFile());
    setInstruction("passes client-side checks");
    const view = await strictApp.submit();
    expect(view).toBeNull();
    expect(text("#instruction-error")).toContain("non-empty");
  });
});

describe("weight steering", () => {
  beforeEach(async () => {
    setImage(pngFile());
    setInstruction("add birds to the sky");
    await app.submit();
  });

  it("uses slider bounds from the service config, not hardcoded", () => {
    const slider = root.querySelector("#weight-slider") as HTMLInputElement;
    expect(slider.min).toBe("0.5");
    expect(slider.max).toBe("1.5");
    expect(text("#steer label, #steer")).toContain("0.75 / 1 / 1.25");
  });

  it("produces the three-pane comparison across the weight grid", async () => {
    await app.steer(0.75);
    await app.steer(1.25);
    expect(app.gallery.map((entry) => entry.weight)).toEqual([0.75, 1.0, 1.25]);
    const panes = [...root.querySelectorAll("#gallery figure")];
    expect(panes.map((pane) => pane.getAttribute("data-weight")))
      .toEqual(["0.75", "1", "1.25"]);
    expect(server.inversions).toBe(1); // one inversion serves the whole sweep
  });

  it("treats a duplicate weight as a cached no-op", async () => {
    await app.steer(0.75);
    const before = server.calls.rerun;
    const view = await app.steer(0.75);
    expect(view).toBeNull();
    expect(server.calls.rerun).toBe(before);
    expect(app.gallery).toHaveLength(2);
    expect(text("#status-text")).toContain("cached");
  });

  it("marks the skipped stages during a rerun", async () => {
    await app.steer(0.75);
    const inverting = root.querySelector('.stage[data-stage="inverting"]');
    expect(inverting?.classList.contains("skipped")).toBe(true);
  });

  it("prompts a full re-edit when the cache is evicted", async () => {
    server.cacheEvicted = true;
    const view = await app.steer(1.25);
    expect(view).toBeNull();
    expect(text("#status-text")).toContain("full edit");
  });

  it("refuses to steer before a base job exists", async () => {
    document.body.innerHTML = '<div id="app"></div>';
    root = document.getElementById("app")!;
    const fresh = await createApp(root, new ApiClient("", server.fetch),
                                  { pollIntervalMs: 1 });
    const view = await fresh.steer(0.75);
    expect(view).toBeNull();
    expect(text("#status-text")).toContain("edit first");
  });
});
