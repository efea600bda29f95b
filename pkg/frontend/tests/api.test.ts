import { describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api";
import { createFakeServer } from "./fake-server";

function client(server = createFakeServer()) {
  return { api: new ApiClient("", server.fetch), server };
}

function pngBlob(): Blob {
  return new Blob([new Uint8Array([0x89, 0x50, 0x4e, 0x47])],
                  { type: "image/png" });
}

describe("ApiClient", () => {
  it("fetches the service config", async () => {
    const { api } = client();
    const config = await api.getConfig();
    expect(config.weight_grid).toEqual([0.75, 1.0, 1.25]);
    expect(config.weight_min).toBe(0.5);
    expect(config.profile).toBe("mock");
  });

  it("submits an edit as multipart form data", async () => {
    const { api, server } = client();
    const accepted = await api.submitEdit(pngBlob(), "add a hat", { weight: 1.0 });
    expect(accepted.job_id).toMatch(/^job-/);
    expect(server.calls.submit).toBe(1);
  });

  it("surfaces validation errors with their field", async () => {
    const { api } = client();
    await expect(api.submitEdit(pngBlob(), "   ")).rejects.toMatchObject({
      status: 422,
      field: "instruction",
    });
  });

  it("polls a job to completion and reports progress", async () => {
    const { api } = client();
    const accepted = await api.submitEdit(pngBlob(), "add a hat");
    const seen: string[] = [];
    const view = await api.pollJob(accepted.job_id,
                                   (v) => seen.push(v.status), 1);
    expect(view.status).toBe("done");
    expect(view.result?.image_url).toContain("/images/");
    expect(seen).toEqual(["captioning", "inverting", "generating", "done"]);
  });

  it("fails the poll when the job fails", async () => {
    const server = createFakeServer();
    const api = new ApiClient("", server.fetch);
    const accepted = await api.submitEdit(pngBlob(), "add a hat");
    const job = server.jobs.get(accepted.job_id)!;
    job.view.status = "failed";
    job.view.error = "pipeline exploded";
    job.stageIndex = job.stages.length - 1; // stop advancing
    await expect(api.pollJob(accepted.job_id, undefined, 1))
      .rejects.toBeInstanceOf(ApiError);
  });

  it("requests a rerun with the weight payload", async () => {
    const { api } = client();
    const accepted = await api.submitEdit(pngBlob(), "add a hat");
    await api.pollJob(accepted.job_id, undefined, 1);
    const rerun = await api.rerun(accepted.job_id, 1.25);
    expect(rerun.job_id).not.toBe(accepted.job_id);
    const view = await api.pollJob(rerun.job_id, undefined, 1);
    expect(view.kind).toBe("rerun");
    expect(view.result?.weight).toBe(1.25);
  });

  it("joins image urls against the base", () => {
    const api = new ApiClient("http://example.test");
    expect(api.imageUrl({ image_id: "x", image_url: "/images/x",
                          manifest_id: "m", weight: 1 }))
      .toBe("http://example.test/images/x");
  });

  it("maps unknown ids to 404 errors", async () => {
    const { api } = client();
    await expect(api.getJob("nope")).rejects.toMatchObject({ status: 404 });
  });
});
