import { ApiClient } from "./api.js";
import { RatingApp } from "./app.js";

declare global {
  interface Window {
    RATING_API_BASE?: string;
  }
}

const root = document.getElementById("app");
if (!root) throw new Error("missing #app container");
const api = new ApiClient(window.RATING_API_BASE ?? "");
const app = new RatingApp(root, api, window.localStorage);
void app.start();
